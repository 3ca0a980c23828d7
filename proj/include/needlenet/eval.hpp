#pragma once

#include "needlenet/losses.hpp"
#include "needlenet/net.hpp"
#include "needlenet/synth.hpp"

#include <cstdio>
#include <deque>
#include <fstream>
#include <functional>
#include <string>
#include <thread>
#include <vector>

namespace needlenet {

constexpr double kBeliefThreshold = 0.5;

struct Classification {
    int class_id = -1;
    double best_iou = 0.0;
    bool degenerate = false;  // empty thresholded belief: tie rule applied
};

namespace eval_detail {

template <typename S>
std::vector<bool> threshold_belief(const Tensor<S>& belief) {
    std::vector<bool> bin(static_cast<std::size_t>(belief.numel()));
    for (Index i = 0; i < belief.numel(); ++i)
        bin[static_cast<std::size_t>(i)] = static_cast<double>(belief.value()[i]) > kBeliefThreshold;
    return bin;
}

template <typename S>
double binary_iou(const std::vector<bool>& bin, const Tensor<S>& mask) {
    Index inter = 0, uni = 0;
    for (Index i = 0; i < mask.numel(); ++i) {
        bool m = mask.value()[i] != S(0);
        bool b = bin[static_cast<std::size_t>(i)];
        inter += (m && b);
        uni += (m || b);
    }
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace eval_detail

// Thresholds the belief at 0.5 and picks the candidate object whose mask has
// the highest IoU with it; exact ties and all-zero beliefs resolve to the
// lowest class id.
template <typename S>
Classification classify_by_iou(const Tensor<S>& belief, const std::vector<ObjectInstanceT<S>>& objects) {
    if (objects.empty()) throw std::invalid_argument("classify_by_iou: no candidate objects");
    auto bin = eval_detail::threshold_belief(belief);
    bool any = false;
    for (bool b : bin) any |= b;
    Classification best;
    for (const auto& o : objects) {
        double iou = eval_detail::binary_iou(bin, o.mask);
        if (best.class_id < 0 || iou > best.best_iou || (iou == best.best_iou && o.class_id < best.class_id)) {
            best.class_id = o.class_id;
            best.best_iou = iou;
        }
    }
    best.degenerate = !any;
    return best;
}

struct PickupResult {
    bool has_point = false;
    double x = 0.0, y = 0.0;
    double distance = -1.0;
    bool success = false;
};

// Pickup point: centroid of the largest 4-connected component of the
// thresholded belief. Success means it lands within `threshold` pixels of
// the matched object's labelled pickup point.
template <typename S>
PickupResult pickup_metrics(const Tensor<S>& belief, int predicted_class,
                            const std::vector<ObjectInstanceT<S>>& objects, double threshold) {
    const Index h = belief.dim(1), w = belief.dim(2);
    auto bin = eval_detail::threshold_belief(belief);

    // match: best-IoU object among those of the predicted class
    const ObjectInstanceT<S>* match = nullptr;
    double best = -1.0;
    for (const auto& o : objects) {
        if (o.class_id != predicted_class) continue;
        double iou = eval_detail::binary_iou(bin, o.mask);
        if (iou > best) {
            best = iou;
            match = &o;
        }
    }
    if (!match)
        throw std::invalid_argument("pickup_metrics: predicted class " + std::to_string(predicted_class) +
                                    " not among the candidate objects");

    PickupResult r;
    std::vector<int> comp(static_cast<std::size_t>(h * w), -1);
    int best_comp = -1;
    Index best_size = 0;
    double best_sx = 0, best_sy = 0;
    int next = 0;
    for (Index start = 0; start < h * w; ++start) {
        if (!bin[static_cast<std::size_t>(start)] || comp[static_cast<std::size_t>(start)] >= 0) continue;
        Index size = 0;
        double sx = 0, sy = 0;
        std::deque<Index> queue{start};
        comp[static_cast<std::size_t>(start)] = next;
        while (!queue.empty()) {
            Index p = queue.front();
            queue.pop_front();
            ++size;
            Index py = p / w, px = p % w;
            sx += static_cast<double>(px);
            sy += static_cast<double>(py);
            const Index nbr[4] = {p - w, p + w, p - 1, p + 1};
            const bool valid[4] = {py > 0, py + 1 < h, px > 0, px + 1 < w};
            for (int k = 0; k < 4; ++k) {
                if (!valid[k]) continue;
                Index q = nbr[k];
                if (bin[static_cast<std::size_t>(q)] && comp[static_cast<std::size_t>(q)] < 0) {
                    comp[static_cast<std::size_t>(q)] = next;
                    queue.push_back(q);
                }
            }
        }
        if (size > best_size) {
            best_size = size;
            best_comp = next;
            best_sx = sx;
            best_sy = sy;
        }
        ++next;
    }
    if (best_comp < 0) return r;  // empty belief: no point, no success

    r.has_point = true;
    r.x = best_sx / static_cast<double>(best_size);
    r.y = best_sy / static_cast<double>(best_size);
    double dx = r.x - match->pickup_x, dy = r.y - match->pickup_y;
    r.distance = std::sqrt(dx * dx + dy * dy);
    r.success = r.distance <= threshold;
    return r;
}

struct EvalReport {
    std::uint64_t iteration = 0;
    int episodes = 0;
    int num_classes = 0;
    double accuracy = 0.0;
    double mean_iou = 0.0;
    double pickup_success_rate = 0.0;  // over correctly classified episodes
    std::vector<std::vector<std::int64_t>> confusion;  // [true][predicted]
    std::vector<double> precision, recall;

    std::int64_t confusion_total() const {
        std::int64_t t = 0;
        for (const auto& row : confusion)
            for (auto v : row) t += v;
        return t;
    }
    std::int64_t confusion_trace() const {
        std::int64_t t = 0;
        for (std::size_t i = 0; i < confusion.size(); ++i) t += confusion[i][i];
        return t;
    }

    // Recomputes accuracy/precision/recall from the confusion matrix and
    // verifies the stored aggregates agree.
    void check_consistency() const {
        if (confusion_total() != episodes) throw std::logic_error("eval report: confusion total != episode count");
        double acc = episodes == 0 ? 0.0 : static_cast<double>(confusion_trace()) / episodes;
        if (std::abs(acc - accuracy) > 1e-12) throw std::logic_error("eval report: accuracy != trace/total");
        for (int k = 0; k < num_classes; ++k) {
            std::int64_t col = 0, row = 0;
            for (int j = 0; j < num_classes; ++j) {
                col += confusion[static_cast<std::size_t>(j)][static_cast<std::size_t>(k)];
                row += confusion[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)];
            }
            double p = col == 0 ? 0.0 : static_cast<double>(confusion[static_cast<std::size_t>(k)][static_cast<std::size_t>(k)]) / col;
            double rr = row == 0 ? 0.0 : static_cast<double>(confusion[static_cast<std::size_t>(k)][static_cast<std::size_t>(k)]) / row;
            if (std::abs(p - precision[static_cast<std::size_t>(k)]) > 1e-12 ||
                std::abs(rr - recall[static_cast<std::size_t>(k)]) > 1e-12)
                throw std::logic_error("eval report: precision/recall not derivable from confusion");
        }
    }
};

// Produces the task-1 belief for one episode; swap in oracle or chance
// predictors for pipeline tests.
using BeliefFn = std::function<Tensor<float>(const Episode&)>;

inline BeliefFn net_predictor(const SegNet<float>& net) {
    return [&net](const Episode& ep) {
        auto [w, feats] = net.forward_needle(nullptr, ep.needle_image, false, RandomState(0));
        return net.forward_gated(nullptr, ep.haystack_image, w, false, RandomState(0));
    };
}

// Runs the evaluation protocol: gated haystack pass per episode, classification
// by IoU against the episode's candidate masks, confusion/precision/recall,
// discrete IoU against the needle's haystack mask, and the pickup metric over
// correctly classified episodes. Episodes run concurrently read-only.
inline EvalReport evaluate(const BeliefFn& predict, const std::vector<Episode>& episodes,
                           std::uint64_t iteration, int num_classes, double pickup_threshold, int threads = 1) {
    if (episodes.empty()) throw std::invalid_argument("evaluate: empty evaluation set");
    struct PerEpisode {
        int true_class, pred_class;
        double iou;
        bool pickup_ok;
    };
    std::vector<PerEpisode> rows(episodes.size());

    auto work = [&](std::size_t begin, std::size_t step) {
        for (std::size_t i = begin; i < episodes.size(); i += step) {
            const Episode& ep = episodes[i];
            Tensor<float> belief = predict(ep);
            Classification cls = classify_by_iou(belief, ep.objects);
            auto bin = eval_detail::threshold_belief(belief);
            PerEpisode row;
            row.true_class = ep.needle_class;
            row.pred_class = cls.class_id;
            row.iou = eval_detail::binary_iou(bin, ep.haystack_needle_mask());
            row.pickup_ok = false;
            if (cls.class_id == ep.needle_class)
                row.pickup_ok = pickup_metrics(belief, cls.class_id, ep.objects, pickup_threshold).success;
            rows[i] = row;
        }
    };
    const int n_threads = std::max(1, std::min<int>(threads, static_cast<int>(episodes.size())));
    if (n_threads == 1) {
        work(0, 1);
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < n_threads; ++t) pool.emplace_back(work, static_cast<std::size_t>(t), n_threads);
        for (auto& th : pool) th.join();
    }

    EvalReport rep;
    rep.iteration = iteration;
    rep.episodes = static_cast<int>(episodes.size());
    rep.num_classes = num_classes;
    rep.confusion.assign(static_cast<std::size_t>(num_classes),
                         std::vector<std::int64_t>(static_cast<std::size_t>(num_classes), 0));
    std::int64_t correct = 0, pickup_ok = 0;
    double iou_sum = 0;
    for (const auto& row : rows) {
        if (row.true_class < 0 || row.true_class >= num_classes || row.pred_class < 0 ||
            row.pred_class >= num_classes)
            throw std::invalid_argument("evaluate: class id outside [0," + std::to_string(num_classes) + ")");
        rep.confusion[static_cast<std::size_t>(row.true_class)][static_cast<std::size_t>(row.pred_class)] += 1;
        iou_sum += row.iou;
        if (row.true_class == row.pred_class) {
            ++correct;
            pickup_ok += row.pickup_ok;
        }
    }
    rep.accuracy = static_cast<double>(correct) / rep.episodes;
    rep.mean_iou = iou_sum / rep.episodes;
    rep.pickup_success_rate = correct == 0 ? 0.0 : static_cast<double>(pickup_ok) / static_cast<double>(correct);
    for (int k = 0; k < num_classes; ++k) {
        std::int64_t col = 0, row_sum = 0;
        for (int j = 0; j < num_classes; ++j) {
            col += rep.confusion[static_cast<std::size_t>(j)][static_cast<std::size_t>(k)];
            row_sum += rep.confusion[static_cast<std::size_t>(k)][static_cast<std::size_t>(j)];
        }
        auto diag = rep.confusion[static_cast<std::size_t>(k)][static_cast<std::size_t>(k)];
        rep.precision.push_back(col == 0 ? 0.0 : static_cast<double>(diag) / col);
        rep.recall.push_back(row_sum == 0 ? 0.0 : static_cast<double>(diag) / row_sum);
    }
    return rep;
}

inline EvalReport evaluate(const SegNet<float>& net, const std::vector<Episode>& episodes,
                           std::uint64_t iteration, int num_classes, double pickup_threshold, int threads = 1) {
    return evaluate(net_predictor(net), episodes, iteration, num_classes, pickup_threshold, threads);
}

// --- learning curve CSV ----------------------------------------------------

struct CurveRow {
    std::uint64_t iteration = 0;
    std::array<double, 4> losses{};
    std::array<double, 4> weights{};
    double accuracy = 0.0;
    double mean_iou = 0.0;
    double pickup_rate = 0.0;
};

inline std::string format_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline void write_learning_curve(const std::vector<CurveRow>& rows, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_learning_curve: cannot write " + path);
    out << "iteration,loss_task1,loss_task2,loss_task3,loss_spread,w1,w2,w3,w4,accuracy,mean_iou,pickup_rate\n";
    for (const auto& r : rows) {
        out << r.iteration;
        for (double l : r.losses) out << "," << format_g17(l);
        for (double w : r.weights) out << "," << format_g17(w);
        out << "," << format_g17(r.accuracy) << "," << format_g17(r.mean_iou) << "," << format_g17(r.pickup_rate)
            << "\n";
    }
    if (!out) throw std::runtime_error("write_learning_curve: write failed for " + path);
}

inline std::vector<CurveRow> read_learning_curve(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("read_learning_curve: cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("read_learning_curve: empty file " + path);
    std::vector<CurveRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        CurveRow r;
        std::vector<double> vals;
        std::size_t pos = 0;
        while (pos <= line.size()) {
            std::size_t comma = line.find(',', pos);
            std::string cell = line.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
            vals.push_back(std::stod(cell));
            if (comma == std::string::npos) break;
            pos = comma + 1;
        }
        if (vals.size() != 12) throw std::runtime_error("read_learning_curve: malformed row in " + path);
        r.iteration = static_cast<std::uint64_t>(vals[0]);
        for (int i = 0; i < 4; ++i) r.losses[static_cast<std::size_t>(i)] = vals[static_cast<std::size_t>(1 + i)];
        for (int i = 0; i < 4; ++i) r.weights[static_cast<std::size_t>(i)] = vals[static_cast<std::size_t>(5 + i)];
        r.accuracy = vals[9];
        r.mean_iou = vals[10];
        r.pickup_rate = vals[11];
        rows.push_back(r);
    }
    return rows;
}

// Key-value report plus a separate confusion CSV.
inline void write_eval_report(const EvalReport& rep, const std::string& report_path,
                              const std::string& confusion_path) {
    std::ofstream out(report_path);
    if (!out) throw std::runtime_error("write_eval_report: cannot write " + report_path);
    out << "iteration=" << rep.iteration << "\n";
    out << "episodes=" << rep.episodes << "\n";
    out << "num_classes=" << rep.num_classes << "\n";
    out << "accuracy=" << format_g17(rep.accuracy) << "\n";
    out << "mean_iou=" << format_g17(rep.mean_iou) << "\n";
    out << "pickup_success_rate=" << format_g17(rep.pickup_success_rate) << "\n";
    for (int k = 0; k < rep.num_classes; ++k) {
        out << "precision_" << k << "=" << format_g17(rep.precision[static_cast<std::size_t>(k)]) << "\n";
        out << "recall_" << k << "=" << format_g17(rep.recall[static_cast<std::size_t>(k)]) << "\n";
    }
    std::ofstream conf(confusion_path);
    if (!conf) throw std::runtime_error("write_eval_report: cannot write " + confusion_path);
    for (const auto& row : rep.confusion) {
        for (std::size_t j = 0; j < row.size(); ++j) conf << (j ? "," : "") << row[j];
        conf << "\n";
    }
}

}  // namespace needlenet
