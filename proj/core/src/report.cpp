#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "bda/dataset.hpp"
#include "bda/errors.hpp"
#include "bda/pipeline.hpp"

namespace bda {

void write_loss_csv(const std::filesystem::path& path, const std::vector<double>& epoch_loss) {
  std::ostringstream os;
  os << "epoch,loss\n";
  char buf[48];
  for (std::size_t e = 0; e < epoch_loss.size(); ++e) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g\n", e, epoch_loss[e]);
    os << buf;
  }
  atomic_write(path, os.str());
}

std::vector<double> read_loss_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open loss curve " + path.string());
  std::vector<double> out;
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      header = false;
      continue;
    }
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw DataError(path.string() + ": malformed csv line");
    try {
      out.push_back(std::stod(line.substr(comma + 1)));
    } catch (const std::exception&) {
      throw DataError(path.string() + ": malformed loss value in '" + line + "'");
    }
  }
  return out;
}

std::string loss_curves_svg(
    const std::vector<std::pair<std::string, std::vector<double>>>& series) {
  constexpr int kW = 640, kH = 400;
  constexpr int kMarginL = 60, kMarginR = 20, kMarginT = 20, kMarginB = 40;
  static const char* kColors[] = {"#1f6fb2", "#c23b22", "#3c8031", "#7b4fa6"};

  double lo = 0.0, hi = 1e-9;
  std::size_t max_n = 2;
  for (const auto& [name, v] : series) {
    for (double y : v) hi = std::max(hi, y);
    max_n = std::max(max_n, v.size());
  }
  hi *= 1.05;

  const auto sx = [&](std::size_t i) {
    return kMarginL + (kW - kMarginL - kMarginR) * static_cast<double>(i) /
                          static_cast<double>(max_n - 1);
  };
  const auto sy = [&](double y) {
    return kH - kMarginB - (kH - kMarginT - kMarginB) * (y - lo) / (hi - lo);
  };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
     << "\" viewBox=\"0 0 " << kW << " " << kH << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  char buf[256];
  // axes
  std::snprintf(buf, sizeof(buf),
                "<line x1=\"%d\" y1=\"%d\" x2=\"%d\" y2=\"%d\" stroke=\"black\"/>\n", kMarginL,
                kH - kMarginB, kW - kMarginR, kH - kMarginB);
  os << buf;
  std::snprintf(buf, sizeof(buf),
                "<line x1=\"%d\" y1=\"%d\" x2=\"%d\" y2=\"%d\" stroke=\"black\"/>\n", kMarginL,
                kMarginT, kMarginL, kH - kMarginB);
  os << buf;
  for (int tick = 0; tick <= 4; ++tick) {
    const double y = lo + (hi - lo) * tick / 4.0;
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%d\" y=\"%.1f\" font-size=\"11\" text-anchor=\"end\">%.3g</text>\n",
                  kMarginL - 6, sy(y) + 4, y);
    os << buf;
  }
  std::snprintf(buf, sizeof(buf),
                "<text x=\"%d\" y=\"%d\" font-size=\"12\" text-anchor=\"middle\">epoch</text>\n",
                (kMarginL + kW - kMarginR) / 2, kH - 10);
  os << buf;

  int color = 0;
  int legend_y = kMarginT + 14;
  for (const auto& [name, v] : series) {
    const char* c = kColors[color % 4];
    os << "<polyline fill=\"none\" stroke=\"" << c << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < v.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%.1f,%.1f ", sx(i), sy(v[i]));
      os << buf;
    }
    os << "\"/>\n";
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%d\" y=\"%d\" font-size=\"12\" fill=\"%s\">%s</text>\n",
                  kW - kMarginR - 150, legend_y, c, name.c_str());
    os << buf;
    legend_y += 16;
    ++color;
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace bda
