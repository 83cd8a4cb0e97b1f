#include "fesvibs/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include "fesvibs/error.hpp"

namespace fesvibs {

double balanced_accuracy(const std::vector<int>& y_true,
                         const std::vector<int>& y_pred,
                         std::size_t classes) {
  if (y_true.empty())
    throw ValidationError("balanced_accuracy: empty input");
  if (y_true.size() != y_pred.size())
    throw ValidationError("balanced_accuracy: length mismatch");
  std::vector<std::size_t> support(classes, 0), hits(classes, 0);
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    const int t = y_true[i];
    if (t < 0 || static_cast<std::size_t>(t) >= classes)
      throw ValidationError("balanced_accuracy: label out of range");
    ++support[static_cast<std::size_t>(t)];
    if (y_true[i] == y_pred[i]) ++hits[static_cast<std::size_t>(t)];
  }
  double sum = 0;
  std::size_t present = 0;
  for (std::size_t k = 0; k < classes; ++k) {
    if (support[k] == 0) continue;
    sum += static_cast<double>(hits[k]) / static_cast<double>(support[k]);
    ++present;
  }
  if (present == 0)
    throw ValidationError("balanced_accuracy: no class present");
  return sum / static_cast<double>(present);
}

void MetricsRecord::finalize_accuracy() {
  if (balanced_acc.empty()) {
    evaluated = false;
    return;
  }
  evaluated = true;
  double mean = 0;
  for (double a : balanced_acc) mean += a;
  mean /= static_cast<double>(balanced_acc.size());
  double var = 0;
  for (double a : balanced_acc) var += (a - mean) * (a - mean);
  var /= static_cast<double>(balanced_acc.size());
  acc_mean = mean;
  acc_std = std::sqrt(var);
}

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

}  // namespace

std::string metrics_csv(const std::vector<MetricsRecord>& records) {
  std::ostringstream os;
  os << "round,client_id,train_loss,test_balanced_acc,sampled_block\n";
  for (const auto& r : records) {
    for (std::size_t c = 0; c < r.train_loss.size(); ++c) {
      os << r.round << "," << c << "," << fmt_double(r.train_loss[c]) << ",";
      if (r.evaluated) os << fmt_double(r.balanced_acc[c]);
      os << "," << (c < r.sampled_block.size() ? r.sampled_block[c] : -1)
         << "\n";
    }
  }
  return os.str();
}

std::string learning_curve_svg(const std::vector<MetricsRecord>& records) {
  std::vector<const MetricsRecord*> evaluated;
  for (const auto& r : records)
    if (r.evaluated) evaluated.push_back(&r);

  const int width = 640, height = 400, margin = 45;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
     << "\" height=\"" << height << "\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<line x1=\"" << margin << "\" y1=\"" << height - margin << "\" x2=\""
     << width - margin << "\" y2=\"" << height - margin
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << margin << "\" y1=\"" << margin << "\" x2=\"" << margin
     << "\" y2=\"" << height - margin << "\" stroke=\"black\"/>\n";
  os << "<text x=\"" << width / 2 << "\" y=\"" << height - 8
     << "\" font-size=\"12\" text-anchor=\"middle\">round</text>\n";
  os << "<text x=\"14\" y=\"" << height / 2
     << "\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 14 "
     << height / 2 << ")\">balanced accuracy</text>\n";

  if (!evaluated.empty()) {
    const int max_round =
        std::max(1, evaluated.back()->round);
    auto sx = [&](int round) {
      return margin + (width - 2.0 * margin) * round / max_round;
    };
    auto sy = [&](double acc) {
      return height - margin - (height - 2.0 * margin) * acc;
    };
    const std::size_t n_clients = evaluated.front()->balanced_acc.size();
    for (std::size_t c = 0; c < n_clients; ++c) {
      os << "<polyline fill=\"none\" stroke=\"#9ecae1\" stroke-width=\"1\" "
            "points=\"";
      for (const auto* r : evaluated)
        os << sx(r->round) << "," << sy(r->balanced_acc[c]) << " ";
      os << "\"/>\n";
    }
    os << "<polyline fill=\"none\" stroke=\"#08519c\" stroke-width=\"2\" "
          "points=\"";
    for (const auto* r : evaluated) os << sx(r->round) << "," << sy(r->acc_mean)
                                       << " ";
    os << "\"/>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace fesvibs
