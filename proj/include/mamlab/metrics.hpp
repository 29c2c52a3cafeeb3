#pragma once

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "mamlab/errors.hpp"

namespace mamlab {

// Row-major S x C score and 0/1 label matrices.
struct ScoreTable {
    std::size_t samples = 0;
    std::size_t classes = 0;
    std::vector<double> values;

    double at(std::size_t s, std::size_t c) const { return values[s * classes + c]; }
};

inline std::size_t argmax(const double* row, std::size_t n) {
    return static_cast<std::size_t>(std::max_element(row, row + n) - row);
}

// Fraction of rows whose highest score (first on ties) is the labelled class.
inline double accuracy(const ScoreTable& scores, const std::vector<std::size_t>& labels) {
    if (scores.samples == 0) throw InputError("accuracy: no samples");
    if (labels.size() != scores.samples) throw InputError("accuracy: label count differs from sample count");
    std::size_t hits = 0;
    for (std::size_t s = 0; s < scores.samples; ++s) hits += argmax(&scores.values[s * scores.classes], scores.classes) == labels[s];
    return static_cast<double>(hits) / static_cast<double>(scores.samples);
}

// Average precision of one class: samples ranked by descending score (ties keep sample order),
// precision averaged over the ranks of the positives. Returns -1 for a class with no positives.
inline double average_precision(const ScoreTable& scores, const ScoreTable& labels, std::size_t c) {
    std::vector<std::size_t> order(scores.samples);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores.at(a, c) > scores.at(b, c); });
    double hits = 0.0, sum = 0.0;
    for (std::size_t k = 0; k < order.size(); ++k) {
        if (labels.at(order[k], c) != 0.0) {
            hits += 1.0;
            sum += hits / static_cast<double>(k + 1);
        }
    }
    return hits == 0.0 ? -1.0 : sum / hits;
}

// Mean over classes that have at least one positive.
inline double mean_average_precision(const ScoreTable& scores, const ScoreTable& labels) {
    if (scores.samples != labels.samples || scores.classes != labels.classes) {
        throw InputError("mean_average_precision: score and label tables differ in shape");
    }
    double total = 0.0;
    std::size_t counted = 0;
    for (std::size_t c = 0; c < scores.classes; ++c) {
        const double ap = average_precision(scores, labels, c);
        if (ap < 0.0) continue;
        total += ap;
        ++counted;
    }
    if (counted == 0) throw InputError("mean_average_precision: no class has a positive label");
    return total / static_cast<double>(counted);
}

// One-hot label table for single-label data.
inline ScoreTable one_hot(const std::vector<std::size_t>& labels, std::size_t classes) {
    ScoreTable t{labels.size(), classes, std::vector<double>(labels.size() * classes, 0.0)};
    for (std::size_t s = 0; s < labels.size(); ++s) {
        if (labels[s] >= classes) throw InputError("label " + std::to_string(labels[s]) + " outside [0, " + std::to_string(classes) + ")");
        t.values[s * classes + labels[s]] = 1.0;
    }
    return t;
}

} // namespace mamlab
