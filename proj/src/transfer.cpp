#include "rf/transfer.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <tuple>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "json.hpp"
#include "rf/autodiff.hpp"
#include "rf/errors.hpp"
#include "rf/rng.hpp"

namespace rf {

namespace {

bool site_before(Site a, Site b) {
    return std::tie(a.layer, a.token) < std::tie(b.layer, b.token);
}

using Mat = Eigen::MatrixXd;

Mat raw_profile_matrix(const FingerprintSet& f) {
    if (f.fps.empty()) throw config_error("fingerprint set is empty");
    const std::size_t q = f.fps[0].outgoing.size() + f.fps[0].incoming.size();
    Mat x((Eigen::Index)f.fps.size(), (Eigen::Index)q);
    for (std::size_t i = 0; i < f.fps.size(); ++i) {
        const auto& fp = f.fps[i];
        if (fp.outgoing.size() + fp.incoming.size() != q) {
            throw config_error("fingerprints have mismatched profile lengths");
        }
        Eigen::Index c = 0;
        for (double v : fp.outgoing) x((Eigen::Index)i, c++) = v;
        for (double v : fp.incoming) x((Eigen::Index)i, c++) = v;
    }
    return x;
}

} // namespace

int ProbeSet::anchor_layer(int n_layers, std::size_t i) const {
    int l = (int)std::lround(anchor_depths[i] * n_layers);
    return std::clamp(l, 1, n_layers);
}

ProbeSet make_probe_set(std::uint64_t seed, std::size_t d, std::size_t n_tokens,
                        std::size_t n_anchors, std::size_t n_dirs) {
    if (n_anchors == 0 || n_dirs == 0) throw config_error("probe set needs anchors and directions");
    if (n_dirs > d) throw config_error("more probe directions than components");
    if (n_tokens == 0) throw config_error("probe set needs a token grid");

    ProbeSet ps;
    ps.anchor_depths.resize(n_anchors);
    ps.anchor_tokens.resize(n_anchors);
    const int last = (int)n_tokens - 1;
    for (std::size_t i = 0; i < n_anchors; ++i) {
        ps.anchor_depths[i] = (double)(i + 1) / (double)n_anchors;
        if (i % 2 == 1) {
            // deep coverage: every earlier site can reach the last position
            ps.anchor_tokens[i] = last;
        } else {
            const std::size_t spread = n_anchors / 2 + 1;
            ps.anchor_tokens[i] = std::clamp((int)(((i / 2 + 1) * n_tokens) / (spread + 1)), 0, last);
        }
    }
    RngStream rng(seed);
    ps.directions = Tensor({n_dirs, d});
    for (std::size_t r = 0; r < n_dirs; ++r) {
        auto v = unit_vector(rng, d);
        std::copy(v.begin(), v.end(), ps.directions.row(r).begin());
    }
    return ps;
}

FingerprintSet response_fingerprints(const Parameters& p, std::span<const int> tokens,
                                     const std::vector<Site>& sites, const ProbeSet& probes,
                                     std::size_t rank) {
    const std::size_t n = tokens.size();
    const std::size_t d = (std::size_t)p.cfg.d_model;
    const std::size_t A = probes.n_anchors();
    const std::size_t M = probes.n_dirs();
    if (sites.empty()) throw config_error("no sites to fingerprint");
    if (A == 0 || M == 0) throw config_error("probe set needs anchors and directions");
    if (probes.directions.shape[1] != d) throw config_error("probe directions have wrong dimension");
    if (probes.anchor_tokens.size() != A) throw config_error("probe anchors are inconsistent");
    if (rank == 0 || rank > A * M) throw config_error("fingerprint rank exceeds the probe count");
    for (std::size_t i = 0; i < A; ++i) {
        if (!(probes.anchor_depths[i] > 0.0) || probes.anchor_depths[i] > 1.0) {
            throw config_error("anchor depths must lie in (0, 1]");
        }
        if (probes.anchor_tokens[i] < 0 || (std::size_t)probes.anchor_tokens[i] >= n) {
            throw config_error("anchor token outside the prompt");
        }
    }
    for (const Site& s : sites) validate_site(p.cfg, n, s);

    ForwardTrace trace = forward_trace(p, tokens);
    std::vector<Site> anchors(A);
    for (std::size_t a = 0; a < A; ++a) {
        anchors[a] = {probes.anchor_layer(p.cfg.n_layers, a), probes.anchor_tokens[a]};
    }

    // one JVP per (anchor, direction) feeds every incoming profile; one seeded
    // VJP per (anchor, direction) feeds every outgoing profile
    std::vector<TangentField> tang(A * M, TangentField(0, 0, 0));
    std::vector<SensitivityField> sens(A * M, SensitivityField(0, 0, 0));
    std::exception_ptr eptr;
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < A * M; ++i) {
        try {
            const std::size_t a = i / M, k = i % M;
            tang[i] = jvp_residual(trace, anchors[a], probes.directions.row(k));
            sens[i] = vjp_seed(trace, anchors[a], probes.directions.row(k));
        } catch (...) {
#pragma omp critical
            if (!eptr) eptr = std::current_exception();
        }
    }
    if (eptr) std::rethrow_exception(eptr);

    FingerprintSet out;
    out.n_layers = p.cfg.n_layers;
    out.n_anchors = A;
    out.n_dirs = M;
    out.rank = rank;
    out.fps.resize(sites.size());
    for (std::size_t si = 0; si < sites.size(); ++si) {
        Fingerprint& fp = out.fps[si];
        fp.site = sites[si];
        fp.outgoing.assign(M * A * M, 0.0);
        fp.incoming.assign(A * M * M, 0.0);
        for (std::size_t a = 0; a < A; ++a) {
            for (std::size_t m = 0; m < M; ++m) {
                const auto srow = sens[a * M + m].row(fp.site.layer, fp.site.token);
                for (std::size_t k = 0; k < M; ++k) {
                    fp.outgoing[k * A * M + a * M + m] = dot(srow, probes.directions.row(k));
                }
            }
            for (std::size_t k = 0; k < M; ++k) {
                const auto trow = tang[a * M + k].row(fp.site.layer, fp.site.token);
                for (std::size_t m = 0; m < M; ++m) {
                    fp.incoming[(a * M + k) * M + m] = dot(trow, probes.directions.row(m));
                }
            }
        }
    }

    Mat x = raw_profile_matrix(out);
    Eigen::BDCSVD<Mat> svd(x, Eigen::ComputeThinV);
    const Eigen::Index rr = std::min<Eigen::Index>((Eigen::Index)rank, svd.matrixV().cols());
    Mat coords = x * svd.matrixV().leftCols(rr);
    for (std::size_t si = 0; si < sites.size(); ++si) {
        out.fps[si].reduced.assign(rank, 0.0);
        for (Eigen::Index j = 0; j < rr; ++j) out.fps[si].reduced[(std::size_t)j] = coords((Eigen::Index)si, j);
    }
    return out;
}

double fingerprint_distance(const Fingerprint& a, const Fingerprint& b) {
    if (a.outgoing.size() != b.outgoing.size() || a.incoming.size() != b.incoming.size()) {
        throw config_error("fingerprints come from different probe sets");
    }
    double s = 0.0;
    for (std::size_t i = 0; i < a.outgoing.size(); ++i) {
        const double e = a.outgoing[i] - b.outgoing[i];
        s += e * e;
    }
    for (std::size_t i = 0; i < a.incoming.size(); ++i) {
        const double e = a.incoming[i] - b.incoming[i];
        s += e * e;
    }
    return std::sqrt(s);
}

TransferMap estimate_intertwiner(const FingerprintSet& src, const FingerprintSet& dst,
                                 double eps_s, double lambda) {
    if (src.fps.empty() || dst.fps.empty()) throw config_error("fingerprint set is empty");
    if (src.n_anchors != dst.n_anchors || src.n_dirs != dst.n_dirs) {
        throw config_error("fingerprint sets use different probe sets");
    }
    if (src.rank != dst.rank) throw config_error("fingerprint sets use different ranks");
    if (!(eps_s > 0.0)) throw config_error("depth window must be positive");
    if (lambda < 0.0) throw config_error("ridge weight must be non-negative");
    if (src.n_layers < 1 || dst.n_layers < 1) throw config_error("models must have layers");

    Mat xs = raw_profile_matrix(src);
    Mat xd = raw_profile_matrix(dst);
    if (xs.cols() != xd.cols()) throw config_error("fingerprints have mismatched profile lengths");

    // joint reduction so the two models' coordinates live in one basis
    Mat joint(xs.rows() + xd.rows(), xs.cols());
    joint.topRows(xs.rows()) = xs;
    joint.bottomRows(xd.rows()) = xd;
    Eigen::BDCSVD<Mat> svd(joint, Eigen::ComputeThinV);
    const Eigen::Index rr = std::min<Eigen::Index>((Eigen::Index)src.rank, svd.matrixV().cols());
    Mat ys = xs * svd.matrixV().leftCols(rr);
    Mat yd = xd * svd.matrixV().leftCols(rr);

    const std::size_t ns = src.fps.size();
    const std::size_t nt = dst.fps.size();
    TransferMap map;
    map.source_layers = src.n_layers;
    map.target_layers = dst.n_layers;
    map.eps_s = eps_s;
    map.source_sites.resize(ns);
    for (std::size_t i = 0; i < ns; ++i) map.source_sites[i] = src.fps[i].site;
    map.target_sites.resize(nt);
    for (std::size_t i = 0; i < nt; ++i) map.target_sites[i] = dst.fps[i].site;
    map.p = Tensor({nt, ns});

    for (std::size_t t = 0; t < nt; ++t) {
        const double st = (double)map.target_sites[t].layer / dst.n_layers;
        std::vector<std::size_t> window;
        for (std::size_t s = 0; s < ns; ++s) {
            const double ss = (double)map.source_sites[s].layer / src.n_layers;
            if (std::abs(st - ss) < eps_s) window.push_back(s);
        }
        if (window.empty()) {
            ++map.n_empty_windows;
            continue;
        }
        Mat yw((Eigen::Index)window.size(), rr);
        for (std::size_t w = 0; w < window.size(); ++w) yw.row((Eigen::Index)w) = ys.row((Eigen::Index)window[w]);
        Mat g = yw * yw.transpose();
        g.diagonal().array() += lambda;
        Eigen::VectorXd rhs = yw * yd.row((Eigen::Index)t).transpose();
        Eigen::VectorXd wts = g.ldlt().solve(rhs);
        for (std::size_t w = 0; w < window.size(); ++w) {
            map.p.at(t, window[w]) = wts[(Eigen::Index)w];
        }
    }

    // nonnegative normalization per column; an all-tiny column is zeroed so
    // the large-lambda limit reports as unmapped
    for (std::size_t s = 0; s < ns; ++s) {
        double col_max = 0.0, col_sum = 0.0;
        for (std::size_t t = 0; t < nt; ++t) {
            map.p.at(t, s) = std::abs(map.p.at(t, s));
            col_max = std::max(col_max, map.p.at(t, s));
            col_sum += map.p.at(t, s);
        }
        if (col_max < 1e-8) {
            for (std::size_t t = 0; t < nt; ++t) map.p.at(t, s) = 0.0;
        } else {
            for (std::size_t t = 0; t < nt; ++t) map.p.at(t, s) /= col_sum;
        }
    }
    return map;
}

void transfer_map(TransferMap& map) {
    const std::size_t nt = map.target_sites.size();
    const std::size_t ns = map.source_sites.size();
    if (map.p.shape.size() != 2 || map.p.shape[0] != nt || map.p.shape[1] != ns) {
        throw config_error("transfer map matrix has wrong shape");
    }
    map.mapped_to.assign(ns, -1);
    map.unmapped.assign(ns, false);
    for (std::size_t s = 0; s < ns; ++s) {
        long best = -1;
        double best_v = 0.0;
        for (std::size_t t = 0; t < nt; ++t) {
            const double v = std::abs(map.p.at(t, s));
            if (v == 0.0) continue;
            const bool better =
                best < 0 || v > best_v ||
                (v == best_v && site_before(map.target_sites[t], map.target_sites[(std::size_t)best]));
            if (better) {
                best = (long)t;
                best_v = v;
            }
        }
        if (best < 0) {
            map.unmapped[s] = true;
        } else {
            map.mapped_to[s] = (int)best;
        }
    }
}

std::string transfer_map_to_json(const TransferMap& map) {
    nlohmann::ordered_json j;
    j["eps_s"] = map.eps_s;
    j["source_layers"] = map.source_layers;
    j["target_layers"] = map.target_layers;
    j["n_empty_windows"] = map.n_empty_windows;
    j["pairs"] = nlohmann::ordered_json::array();
    for (std::size_t s = 0; s < map.source_sites.size(); ++s) {
        nlohmann::ordered_json e;
        e["source"] = {map.source_sites[s].layer, map.source_sites[s].token};
        if (s < map.mapped_to.size() && map.mapped_to[s] >= 0) {
            const Site t = map.target_sites[(std::size_t)map.mapped_to[s]];
            e["target"] = {t.layer, t.token};
            e["score"] = map.p.at((std::size_t)map.mapped_to[s], s);
        } else {
            e["target"] = nullptr;
            e["score"] = 0.0;
        }
        j["pairs"].push_back(std::move(e));
    }
    return j.dump(2);
}

Parameters refine_depth(const Parameters& p, int factor) {
    if (factor < 1) throw config_error("refinement factor must be at least 1");
    Parameters out;
    out.cfg = p.cfg;
    out.cfg.n_layers = p.cfg.n_layers * factor;
    out.tok_emb = p.tok_emb;
    out.pos_emb = p.pos_emb;
    out.lnf_g = p.lnf_g;
    out.lnf_b = p.lnf_b;
    out.unembed = p.unembed;
    const double scale = 1.0 / (double)factor;
    out.blocks.reserve((std::size_t)out.cfg.n_layers);
    for (const BlockParams& b : p.blocks) {
        for (int r = 0; r < factor; ++r) {
            BlockParams nb = b;
            for (double& v : nb.wo.data) v *= scale;
            for (double& v : nb.bo.data) v *= scale;
            for (double& v : nb.w2.data) v *= scale;
            for (double& v : nb.b2.data) v *= scale;
            out.blocks.push_back(std::move(nb));
        }
    }
    return out;
}

} // namespace rf
