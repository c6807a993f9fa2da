#include "hiphop/report.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace hiphop {

RunHistory read_history(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read history " + path.string());
  RunHistory run;
  run.name = path.filename() == "history.jsonl" && path.has_parent_path() && !path.parent_path().filename().empty()
                 ? path.parent_path().filename().string()
                 : path.stem().string();
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      EpochRecord r;
      r.epoch = j.at("epoch").get<int>();
      r.lr = j.at("lr").get<double>();
      r.tau = j.at("tau").get<double>();
      r.loss.total = j.at("loss_total").get<double>();
      r.loss.prediction = j.at("loss_prediction").get<double>();
      r.loss.contrastive = j.at("loss_contrastive").get<double>();
      r.valid_hr = j.at("valid_hr").get<double>();
      r.valid_mrr = j.at("valid_mrr").get<double>();
      r.steps = j.value("steps", 0);
      r.fallback_negatives = j.value("fallback_negatives", int64_t{0});
      r.reservoir_negatives = j.value("reservoir_negatives", int64_t{0});
      run.epochs.push_back(r);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (run.epochs.empty()) throw std::runtime_error("history " + path.string() + " has no epochs");
  return run;
}

namespace {

const EpochRecord& best_epoch(const RunHistory& run) {
  const EpochRecord* best = &run.epochs.front();
  for (const auto& e : run.epochs) {
    if (e.valid_hr > best->valid_hr) best = &e;
  }
  return *best;
}

std::string fmt(double x, int precision) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(precision);
  s << x;
  return s.str();
}

void line_chart(const std::filesystem::path& path, const std::string& title,
                const std::vector<std::pair<std::string, std::vector<double>>>& series) {
  constexpr double kW = 640, kH = 400, kPad = 50;
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd"};
  double lo = INFINITY, hi = -INFINITY;
  size_t n = 0;
  for (const auto& [name, ys] : series) {
    for (double y : ys) {
      lo = std::min(lo, y);
      hi = std::max(hi, y);
    }
    n = std::max(n, ys.size());
  }
  if (hi == lo) {
    hi += 1.0;
    lo -= 1.0;
  }
  auto px = [&](size_t i) { return kPad + (n > 1 ? (kW - 2 * kPad) * i / static_cast<double>(n - 1) : 0.0); };
  auto py = [&](double y) { return kH - kPad - (kH - 2 * kPad) * (y - lo) / (hi - lo); };

  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << kW / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\">" << title
      << "</text>\n"
      << "<line x1=\"" << kPad << "\" y1=\"" << kH - kPad << "\" x2=\"" << kW - kPad << "\" y2=\"" << kH - kPad
      << "\" stroke=\"black\"/>\n"
      << "<line x1=\"" << kPad << "\" y1=\"" << kPad << "\" x2=\"" << kPad << "\" y2=\"" << kH - kPad
      << "\" stroke=\"black\"/>\n"
      << "<text x=\"" << kPad - 4 << "\" y=\"" << py(hi) + 4 << "\" text-anchor=\"end\" font-size=\"11\">"
      << fmt(hi, 3) << "</text>\n"
      << "<text x=\"" << kPad - 4 << "\" y=\"" << py(lo) + 4 << "\" text-anchor=\"end\" font-size=\"11\">"
      << fmt(lo, 3) << "</text>\n"
      << "<text x=\"" << kW / 2 << "\" y=\"" << kH - 12 << "\" text-anchor=\"middle\" font-size=\"12\">epoch</text>\n";
  for (size_t s = 0; s < series.size(); ++s) {
    const auto& [name, ys] = series[s];
    const char* color = kColors[s % 4];
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (size_t i = 0; i < ys.size(); ++i) out << (i ? " " : "") << px(i) << ',' << py(ys[i]);
    out << "\"/>\n<text x=\"" << kW - kPad << "\" y=\"" << kPad + 14 * s << "\" text-anchor=\"end\" font-size=\"12\" fill=\""
        << color << "\">" << name << "</text>\n";
  }
  out << "</svg>\n";
}

}  // namespace

std::string history_markdown(const std::vector<RunHistory>& runs, int k) {
  if (runs.empty()) throw std::invalid_argument("no histories to report");
  std::ostringstream out;
  out << "| Run | Epochs | Best epoch | HR@" << k << " | MRR@" << k << " | Final loss |\n"
      << "|---|---|---|---|---|---|\n";
  for (const auto& r : runs) {
    const EpochRecord& b = best_epoch(r);
    out << "| " << r.name << " | " << r.epochs.size() << " | " << b.epoch << " | " << fmt(b.valid_hr, 2) << " | "
        << fmt(b.valid_mrr, 2) << " | " << fmt(r.epochs.back().loss.total, 4) << " |\n";
  }
  return out.str();
}

std::string history_csv(const std::vector<RunHistory>& runs) {
  if (runs.empty()) throw std::invalid_argument("no histories to report");
  std::ostringstream out;
  out << "run,epochs,best_epoch,valid_hr,valid_mrr,final_loss\n";
  for (const auto& r : runs) {
    const EpochRecord& b = best_epoch(r);
    out << '"' << r.name << "\"," << r.epochs.size() << ',' << b.epoch << ',' << fmt(b.valid_hr, 2) << ','
        << fmt(b.valid_mrr, 2) << ',' << fmt(r.epochs.back().loss.total, 6) << '\n';
  }
  return out.str();
}

std::vector<std::filesystem::path> plot_histories(const std::vector<RunHistory>& runs,
                                                  const std::filesystem::path& dir) {
  if (runs.empty()) throw std::invalid_argument("no histories to plot");
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written;
  for (const auto& r : runs) {
    std::vector<double> total, pred, con, hr, mrr;
    for (const auto& e : r.epochs) {
      total.push_back(e.loss.total);
      pred.push_back(e.loss.prediction);
      con.push_back(e.loss.contrastive);
      hr.push_back(e.valid_hr);
      mrr.push_back(e.valid_mrr);
    }
    auto loss_path = dir / (r.name + "_loss.svg");
    line_chart(loss_path, r.name + ": training loss", {{"total", total}, {"prediction", pred}, {"contrastive", con}});
    auto metric_path = dir / (r.name + "_metrics.svg");
    line_chart(metric_path, r.name + ": validation metrics", {{"HR", hr}, {"MRR", mrr}});
    written.push_back(loss_path);
    written.push_back(metric_path);
  }
  return written;
}

}  // namespace hiphop
