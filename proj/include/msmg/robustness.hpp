#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "msmg/perturb.hpp"
#include "msmg/pipeline.hpp"

namespace msmg {

struct SweepRow {
    PerturbKind kind;
    double param = 0.0;
    double f1_mean = 0.0;
    std::optional<double> auc_mean;
    std::size_t n_images = 0;
};

// For every grid point, perturb each evaluation image (masks untouched),
// rerun the metrics, and record the aggregates; one row per (kind, param).
// Stochastic perturbations reseed per (grid point, image) so rows are
// independent of evaluation order.
inline std::vector<SweepRow> robustness_sweep(const MsmgNet<float>& model,
                                              const std::vector<SampleRecord>& samples,
                                              const std::vector<PerturbationSpec>& specs,
                                              std::uint64_t seed = 0) {
    if (samples.empty()) throw DataError("robustness_sweep: no samples");
    std::vector<SweepRow> rows;
    for (const auto& spec : specs) {
        spec.validate();
        for (double param : spec.params) {
            std::vector<SampleRecord> perturbed;
            for (std::size_t i = 0; i < samples.size(); ++i) {
                std::mt19937_64 rng(seed ^ fnv1a(perturb_kind_name(spec.kind) + ("/" +
                                    std::to_string(param)) + "#" + std::to_string(i)));
                SampleRecord s = samples[i];
                s.image = apply_perturbation(s.image, spec.kind, param, rng);
                perturbed.push_back(std::move(s));
            }
            auto summary = evaluate(model, perturbed);
            rows.push_back({spec.kind, param, summary.f1_mean, summary.auc_mean,
                            perturbed.size()});
        }
    }
    return rows;
}

// Header row then tab-separated values; missing AUC prints "nan".
inline void write_sweep_table(std::ostream& os, const std::vector<SweepRow>& rows) {
    os << "kind\tparam\tf1_mean\tauc_mean\tn_images\n";
    for (const auto& r : rows) {
        os << perturb_kind_name(r.kind) << '\t' << r.param << '\t' << r.f1_mean << '\t';
        if (r.auc_mean)
            os << *r.auc_mean;
        else
            os << "nan";
        os << '\t' << r.n_images << '\n';
    }
}

}  // namespace msmg
