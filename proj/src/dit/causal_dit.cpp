#include "cmdm/dit/causal_dit.hpp"

#include "cmdm/errors.hpp"
#include "cmdm/nn/init.hpp"
#include "cmdm/nn/param_source.hpp"

#include <cmath>
#include <string>

namespace cmdm::dit {

namespace {

using nn::AttentionMask;
using nn::EvalParams;
using nn::TapeParams;

// Rows [row_start, row_start + rows) attend to these caption tokens.
struct CrossSegment {
  int row_start = 0;
  int rows = 0;
  std::vector<int> tokens;
};

std::string lp(int layer, const char* name) { return "dit.l" + std::to_string(layer) + "." + name; }

void add_linear(ParamTree& t, const RngKey& key, const std::string& name, int in, int out, bool zero) {
  t.add(name + ".w", zero ? Mat::Zero(in, out) : nn::init_normal(key, name + ".w", in, out, 1.0 / std::sqrt(Real(in))));
  t.add(name + ".b", Mat::Zero(1, out));
}

template <class P>
typename P::Value lin(const P& p, const typename P::Value& x, const std::string& name) {
  return nn::linear(x, p(name + ".w"), p(name + ".b"));
}

template <class V>
V modulate(const V& x, const V& shift, const V& scale) {
  return nn::add(nn::mul(x, nn::add_scalar(scale, 1.0)), shift);
}

void check_levels(const DitConfig& cfg, std::span<const int> levels, Eigen::Index rows) {
  if (static_cast<Eigen::Index>(levels.size()) != rows) throw ShapeError("dit: one noise level per frame required");
  for (int k : levels) {
    if (k < 0 || k > cfg.max_level) {
      throw InputError("dit: noise level " + std::to_string(k) + " outside [0, " + std::to_string(cfg.max_level) + "]");
    }
  }
}

void check_tokens(const DitConfig& cfg, const TextCondition& c) {
  if (c.tokens.empty()) throw InputError("dit: caption has no tokens");
  for (int id : c.tokens) {
    if (id < 0 || id >= cfg.vocab) throw InputError("dit: token id " + std::to_string(id) + " outside vocabulary");
  }
}

// Groups consecutive rows with equal captions.
std::vector<CrossSegment> segments_for(const DitConfig& cfg, std::span<const TextCondition> row_conds) {
  std::vector<CrossSegment> out;
  for (std::size_t r = 0; r < row_conds.size(); ++r) {
    if (!out.empty() && row_conds[r] == row_conds[r - 1]) {
      ++out.back().rows;
      continue;
    }
    check_tokens(cfg, row_conds[r]);
    out.push_back({static_cast<int>(r), 1, row_conds[r].tokens});
  }
  return out;
}

// silu(MLP(sinusoid(level))), one row per frame.
template <class P>
typename P::Value timestep_features(const P& p, const DitConfig& cfg, std::span<const int> levels) {
  auto e = p.lift(nn::timestep_embedding(levels, cfg.hidden));
  e = lin(p, nn::silu(lin(p, e, "dit.t.l1")), "dit.t.l2");
  return nn::silu(e);
}

template <class P>
typename P::Value cross_attention(const P& p, const DitConfig& cfg, int layer, const typename P::Value& h,
                                  const std::vector<CrossSegment>& cross) {
  std::vector<int> ids;
  bool uniform = true;
  for (const CrossSegment& s : cross) {
    ids.insert(ids.end(), s.tokens.begin(), s.tokens.end());
    uniform = uniform && s.rows == cross.front().rows && s.tokens.size() == cross.front().tokens.size();
  }
  auto tok = nn::gather_rows(p("dit.tok"), ids);
  auto q = lin(p, nn::layer_norm(h), lp(layer, "ca.q"));
  auto k = lin(p, tok, lp(layer, "ca.k"));
  auto v = lin(p, tok, lp(layer, "ca.v"));
  AttentionMask open{.causal = false};
  typename P::Value out;
  if (uniform) {
    open.q_block = cross.front().rows;
    open.k_block = static_cast<int>(cross.front().tokens.size());
    out = nn::attention(q, k, v, cfg.heads, open);
  } else {
    int tok_off = 0;
    for (std::size_t i = 0; i < cross.size(); ++i) {
      const CrossSegment& s = cross[i];
      const int n = static_cast<int>(s.tokens.size());
      auto part = nn::attention(nn::slice_rows(q, s.row_start, s.rows), nn::slice_rows(k, tok_off, n),
                                nn::slice_rows(v, tok_off, n), cfg.heads, open);
      out = i == 0 ? part : nn::concat_rows(out, part);
      tok_off += n;
    }
  }
  return lin(p, out, lp(layer, "ca.o"));
}

template <class P>
typename P::Value layer_forward(const P& p, const DitConfig& cfg, int layer, const typename P::Value& h_in,
                                const typename P::Value& tfeat, std::span<const int> positions,
                                const AttentionMask& self_mask, const std::vector<CrossSegment>& cross,
                                const LayerKV* cache, LayerKV* kv_out) {
  const int H = cfg.hidden;
  const int hd = H / cfg.heads;
  auto mod = lin(p, tfeat, lp(layer, "ada"));
  auto part = [&](int i) { return nn::slice_cols(mod, i * H, H); };

  auto a = modulate(nn::layer_norm(h_in), part(0), part(1));
  auto q = nn::apply_rope(lin(p, a, lp(layer, "sa.q")), positions, hd);
  auto k = nn::apply_rope(lin(p, a, lp(layer, "sa.k")), positions, hd);
  auto v = lin(p, a, lp(layer, "sa.v"));
  if (kv_out) *kv_out = {nn::value_of(k), nn::value_of(v)};
  AttentionMask mask = self_mask;
  if (cache && cache->k.rows() > 0) {
    mask.q_offset = static_cast<int>(cache->k.rows());
    k = nn::concat_rows(p.lift(cache->k), k);
    v = nn::concat_rows(p.lift(cache->v), v);
  }
  auto att = lin(p, nn::attention(q, k, v, cfg.heads, mask), lp(layer, "sa.o"));
  auto h = nn::add(h_in, nn::mul(part(2), att));

  h = nn::add(h, cross_attention(p, cfg, layer, h, cross));

  auto m = modulate(nn::layer_norm(h), part(3), part(4));
  m = lin(p, nn::gelu(lin(p, m, lp(layer, "mlp.in"))), lp(layer, "mlp.out"));
  return nn::add(h, nn::mul(part(5), m));
}

template <class P>
typename P::Value dit_core(const P& p, const DitConfig& cfg, const typename P::Value& x, std::span<const int> levels,
                           std::span<const int> positions, const AttentionMask& self_mask,
                           const std::vector<CrossSegment>& cross, const std::vector<LayerKV>* cache,
                           std::vector<LayerKV>* kv_out) {
  auto tfeat = timestep_features(p, cfg, levels);
  auto h = lin(p, x, "dit.in");
  if (kv_out) kv_out->assign(static_cast<std::size_t>(cfg.layers), {});
  for (int l = 0; l < cfg.layers; ++l) {
    const auto li = static_cast<std::size_t>(l);
    h = layer_forward(p, cfg, l, h, tfeat, positions, self_mask, cross, cache ? &(*cache)[li] : nullptr,
                      kv_out ? &(*kv_out)[li] : nullptr);
  }
  auto fmod = lin(p, tfeat, "dit.final.ada");
  auto out = modulate(nn::layer_norm(h), nn::slice_cols(fmod, 0, cfg.hidden), nn::slice_cols(fmod, cfg.hidden, cfg.hidden));
  return lin(p, out, "dit.out");
}

std::vector<int> iota_positions(Eigen::Index n, int start = 0) {
  std::vector<int> pos(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = start + static_cast<int>(i);
  return pos;
}

void check_input(const DitConfig& cfg, const Mat& z, std::span<const int> levels) {
  if (z.rows() == 0) throw InputError("dit_forward: empty latent sequence");
  if (z.cols() != cfg.latent_dim) {
    throw ShapeError("dit_forward: latent width " + std::to_string(z.cols()) + " vs configured " +
                     std::to_string(cfg.latent_dim));
  }
  check_levels(cfg, levels, z.rows());
}

}  // namespace

void DitConfig::validate() const {
  if (layers < 1) throw ConfigError("dit.layers must be >= 1");
  if (heads < 1 || hidden < 1 || hidden % heads != 0) {
    throw ConfigError("dit.hidden (" + std::to_string(hidden) + ") must be divisible by dit.heads (" +
                      std::to_string(heads) + ")");
  }
  if ((hidden / heads) % 2 != 0) throw ConfigError("dit.hidden / dit.heads must be even for rotary encoding");
  if (hidden % 2 != 0) throw ConfigError("dit.hidden must be even");
  if (mlp_ratio < 1) throw ConfigError("dit.mlp_ratio must be >= 1");
  if (latent_dim < 1) throw ConfigError("dit latent width must be >= 1");
  if (vocab < 2) throw ConfigError("dit vocabulary needs at least one token plus the null token");
  if (cond_length < 1) throw ConfigError("dit caption length must be >= 1");
  if (max_level < 1) throw ConfigError("dit max level must be >= 1");
}

ParamTree init_dit(const DitConfig& cfg, const RngKey& key, DitInit mode) {
  cfg.validate();
  const bool id = mode == DitInit::identity;
  const int H = cfg.hidden;
  ParamTree t;
  add_linear(t, key, "dit.in", cfg.latent_dim, H, false);
  t.add("dit.tok", nn::init_normal(key, "dit.tok", cfg.vocab, H, 1.0));
  add_linear(t, key, "dit.t.l1", H, H, false);
  add_linear(t, key, "dit.t.l2", H, H, false);
  for (int l = 0; l < cfg.layers; ++l) {
    add_linear(t, key, lp(l, "ada"), H, 6 * H, id);
    for (const char* n : {"sa.q", "sa.k", "sa.v", "sa.o", "ca.q", "ca.k", "ca.v"}) add_linear(t, key, lp(l, n), H, H, false);
    add_linear(t, key, lp(l, "ca.o"), H, H, id);
    add_linear(t, key, lp(l, "mlp.in"), H, cfg.mlp_ratio * H, false);
    add_linear(t, key, lp(l, "mlp.out"), cfg.mlp_ratio * H, H, false);
  }
  add_linear(t, key, "dit.final.ada", H, 2 * H, id);
  add_linear(t, key, "dit.out", H, cfg.latent_dim, id);
  return t;
}

TextCondition make_null_condition(const DitConfig& cfg) {
  return TextCondition{std::vector<int>(static_cast<std::size_t>(cfg.cond_length), cfg.null_token()), true};
}

bool drop_condition(const RngKey& rng, std::int64_t sample, std::int64_t step, Real p) {
  return rng.uniform(DrawKind::drop, sample, step) < p;
}

Mat dit_forward(const ParamTree& params, const DitConfig& cfg, const Mat& z_noisy, std::span<const int> levels,
                const TextCondition& cond) {
  std::vector<TextCondition> conds(static_cast<std::size_t>(z_noisy.rows()), cond);
  return dit_forward(params, cfg, z_noisy, levels, conds);
}

Mat dit_forward(const ParamTree& params, const DitConfig& cfg, const Mat& z_noisy, std::span<const int> levels,
                std::span<const TextCondition> frame_conds, const AttentionMask& self_mask) {
  check_input(cfg, z_noisy, levels);
  if (static_cast<Eigen::Index>(frame_conds.size()) != z_noisy.rows()) {
    throw ShapeError("dit_forward: one caption per frame required");
  }
  const auto pos = iota_positions(z_noisy.rows());
  return dit_core(EvalParams{params}, cfg, z_noisy, levels, pos, self_mask, segments_for(cfg, frame_conds), nullptr,
                  nullptr);
}

Var dit_forward_graph(Tape& tape, const ParamTree& params, const DitConfig& cfg, const Mat& z_batch,
                      std::span<const int> levels, std::span<const TextCondition> conds, int seq_len) {
  check_input(cfg, z_batch, levels);
  if (seq_len < 1 || static_cast<Eigen::Index>(conds.size()) * seq_len != z_batch.rows()) {
    throw ShapeError("dit_forward_graph: batch rows must equal captions x seq_len");
  }
  std::vector<int> pos(static_cast<std::size_t>(z_batch.rows()));
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int>(i) % seq_len;
  std::vector<CrossSegment> cross;
  for (std::size_t b = 0; b < conds.size(); ++b) {
    check_tokens(cfg, conds[b]);
    cross.push_back({static_cast<int>(b) * seq_len, seq_len, conds[b].tokens});
  }
  AttentionMask mask;
  mask.q_block = seq_len;
  mask.k_block = seq_len;
  TapeParams p{tape, params};
  return dit_core(p, cfg, tape.constant(z_batch), levels, pos, mask, cross, nullptr, nullptr);
}

Mat adaln_modulation(const ParamTree& params, const DitConfig& cfg, int layer, std::span<const int> levels) {
  check_levels(cfg, levels, static_cast<Eigen::Index>(levels.size()));
  EvalParams p{params};
  return lin(p, timestep_features(p, cfg, levels), lp(layer, "ada"));
}

Mat dit_block(const ParamTree& params, const DitConfig& cfg, int layer, const Mat& h, std::span<const int> levels,
              const TextCondition& cond) {
  check_levels(cfg, levels, h.rows());
  if (layer < 0 || layer >= cfg.layers) throw ConfigError("dit_block: layer index out of range");
  check_tokens(cfg, cond);
  EvalParams p{params};
  const auto pos = iota_positions(h.rows());
  const std::vector<CrossSegment> cross{{0, static_cast<int>(h.rows()), cond.tokens}};
  return layer_forward(p, cfg, layer, h, timestep_features(p, cfg, levels), pos, AttentionMask{}, cross, nullptr,
                       nullptr);
}

DitSession::DitSession(const ParamTree& params, const DitConfig& cfg, int horizon)
    : params_(params), cfg_(cfg), horizon_(horizon), cache_(static_cast<std::size_t>(cfg.layers)) {
  cfg_.validate();
  for (LayerKV& kv : cache_) {
    kv.k.resize(0, cfg.hidden);
    kv.v.resize(0, cfg.hidden);
  }
}

Mat DitSession::forward(const Mat& z_window, std::span<const int> levels, std::span<const TextCondition> frame_conds,
                        int commit) {
  check_input(cfg_, z_window, levels);
  const auto rows = static_cast<int>(z_window.rows());
  if (commit < 0 || commit > rows) throw InputError("DitSession: commit count outside the window");
  if (static_cast<int>(frame_conds.size()) < committed_ + rows) {
    throw ShapeError("DitSession: captions do not cover the window");
  }
  AttentionMask mask;
  mask.horizon = horizon_;
  const auto pos = iota_positions(rows, committed_);
  std::vector<CrossSegment> cross = segments_for(cfg_, frame_conds.subspan(static_cast<std::size_t>(committed_),
                                                                           static_cast<std::size_t>(rows)));
  std::vector<LayerKV> fresh;
  Mat eps = dit_core(EvalParams{params_}, cfg_, z_window, levels, pos, mask, cross, &cache_, &fresh);
  ++forwards_;
  if (commit > 0) {
    for (std::size_t l = 0; l < cache_.size(); ++l) {
      cache_[l].k = nn::concat_rows(cache_[l].k, fresh[l].k.topRows(commit));
      cache_[l].v = nn::concat_rows(cache_[l].v, fresh[l].v.topRows(commit));
    }
    committed_ += commit;
  }
  return eps;
}

}  // namespace cmdm::dit
