#include "rgbd/matching.hpp"

#include <cmath>
#include <limits>

#include "rgbd/errors.hpp"

namespace rgbd {

namespace {

// min-cost assignment of all rows to distinct columns, n <= m; shortest
// augmenting paths over potentials
double assign_min_cost(const std::vector<std::vector<double>>& c) {
    const int n = static_cast<int>(c.size());
    if (n == 0) return 0.0;
    const int m = static_cast<int>(c[0].size());
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
    std::vector<int> p(m + 1, 0), way(m + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(m + 1, inf);
        std::vector<char> used(m + 1, 0);
        do {
            used[j0] = 1;
            const int i0 = p[j0];
            int j1 = 0;
            double delta = inf;
            for (int j = 1; j <= m; ++j) {
                if (used[j]) continue;
                const double cur = c[i0 - 1][j - 1] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }
    double total = 0.0;
    for (int j = 1; j <= m; ++j)
        if (p[j]) total += c[p[j] - 1][j - 1];
    return total;
}

} // namespace

MatchResult hungarian_match(const Tensor& cost) {
    if (cost.rank() != 2)
        throw DimensionError("hungarian_match: expected a 2-D cost matrix, got " +
                             cost.shape_str());
    if (!cost.all_finite()) throw NumericError("hungarian_match: non-finite costs");
    const int n = cost.shape[0], m = cost.shape[1];
    if (n > m)
        throw ContractError("hungarian_match: " + std::to_string(n) + " GT rows exceed " +
                            std::to_string(m) + " query columns");

    std::vector<std::vector<double>> full(n, std::vector<double>(m));
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) full[i][j] = cost.at(i, j);
    const double opt = assign_min_cost(full);
    const double tol = 1e-9 * std::max(1.0, std::abs(opt));

    // lexicographic tie-break: fix GT rows in order to the lowest query index
    // that still admits an optimal completion
    MatchResult r;
    r.assignment.assign(n, -1);
    std::vector<char> used_col(m, 0);
    double fixed = 0.0;
    for (int g = 0; g < n; ++g) {
        bool found = false;
        for (int q = 0; q < m && !found; ++q) {
            if (used_col[q]) continue;
            std::vector<std::vector<double>> rest;
            rest.reserve(n - g - 1);
            for (int i = g + 1; i < n; ++i) {
                std::vector<double> row;
                row.reserve(m - g - 1);
                for (int j = 0; j < m; ++j)
                    if (!used_col[j] && j != q) row.push_back(full[i][j]);
                rest.push_back(std::move(row));
            }
            const double total = fixed + full[g][q] + assign_min_cost(rest);
            if (total <= opt + tol) {
                r.assignment[g] = q;
                used_col[q] = 1;
                fixed += full[g][q];
                found = true;
            }
        }
        if (!found) throw NumericError("hungarian_match: no consistent completion");
    }
    r.total_cost = fixed;
    return r;
}

} // namespace rgbd
