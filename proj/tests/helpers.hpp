#pragma once

// Shared test scaffolding: a small encoder shape that keeps finite-difference
// sweeps fast, plus central-difference utilities used by every gradient test.

#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include <doctest.h>

#include "poisonlab/encoders.hpp"
#include "poisonlab/rng.hpp"

namespace testutil {

inline poisonlab::EncoderSpec small_spec() {
    poisonlab::EncoderSpec s;
    s.image_h = 3;
    s.image_w = 3;
    s.hidden_dim = 4;
    s.text_embed_dim = 3;
    s.embed_dim = 4;
    s.vocab_size = 8;
    return s;
}

// Central difference of a scalar function, one coordinate at a time. The
// step scales with the coordinate so large and tiny parameters are probed
// at comparable relative resolution.
inline std::vector<double> fd_gradient(const std::function<double(std::span<const double>)>& f,
                                       std::vector<double> x, double h = 1e-6) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double step = h * (1.0 + std::abs(x[i]));
        const double keep = x[i];
        x[i] = keep + step;
        const double up = f(x);
        x[i] = keep - step;
        const double down = f(x);
        x[i] = keep;
        g[i] = (up - down) / (2.0 * step);
    }
    return g;
}

// Coordinate-wise comparison with a scale-aware tolerance.
inline void check_gradients_close(std::span<const double> analytic, std::span<const double> fd,
                                  double tol) {
    REQUIRE(analytic.size() == fd.size());
    double scale = 1.0;
    for (double v : analytic) scale = std::max(scale, std::abs(v));
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double err = std::abs(analytic[i] - fd[i]);
        if (err > tol * scale) {
            CAPTURE(i);
            CAPTURE(analytic[i]);
            CAPTURE(fd[i]);
            REQUIRE(err <= tol * scale);
        }
    }
}

inline std::vector<double> random_unit_rows(poisonlab::Rng& rng, std::size_t n, std::size_t d) {
    std::vector<double> rows(n * d);
    for (std::size_t i = 0; i < n; ++i) {
        double sq = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            rows[i * d + j] = rng.normal();
            sq += rows[i * d + j] * rows[i * d + j];
        }
        const double inv = 1.0 / std::sqrt(sq);
        for (std::size_t j = 0; j < d; ++j) rows[i * d + j] *= inv;
    }
    return rows;
}

}  // namespace testutil
