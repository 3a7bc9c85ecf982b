#include "cmdm/diffusion/training.hpp"

#include "cmdm/errors.hpp"

namespace cmdm::diffusion {

DfBatch df_prepare(const Mat& z_batch, std::span<const TextCondition> conds, int seq_len, const DiffusionSchedule& s,
                   const RngKey& rng, const TextCondition& null_cond, const DfOptions& opt) {
  if (seq_len < 1 || static_cast<Eigen::Index>(conds.size()) * seq_len != z_batch.rows()) {
    throw ShapeError("df_prepare: batch rows must equal captions x seq_len");
  }
  if (opt.fixed_level && (*opt.fixed_level < 0 || *opt.fixed_level > s.K)) {
    throw InputError("df_prepare: fixed level outside [0, K]");
  }
  DfBatch b;
  b.seq_len = seq_len;
  b.z_tilde.resize(z_batch.rows(), z_batch.cols());
  b.eps.resize(z_batch.rows(), z_batch.cols());
  for (std::size_t i = 0; i < conds.size(); ++i) {
    const RngKey key = rng.derive(i);
    std::vector<int> levels(static_cast<std::size_t>(seq_len));
    for (int t = 0; t < seq_len; ++t) {
      int k;
      if (opt.fixed_level) {
        k = *opt.fixed_level;
      } else {
        k = static_cast<int>(key.uniform_int(DrawKind::level, opt.shared_level ? 0 : t, 0, 0, s.K));
      }
      levels[static_cast<std::size_t>(t)] = k;
      b.levels.push_back(k);
      b.train_levels.push_back(s.train_index[static_cast<std::size_t>(k)]);
    }
    const auto rows = z_batch.middleRows(static_cast<Eigen::Index>(i) * seq_len, seq_len);
    Diffused d = forward_diffuse(rows, levels, s, key);
    b.z_tilde.middleRows(static_cast<Eigen::Index>(i) * seq_len, seq_len) = d.z_tilde;
    b.eps.middleRows(static_cast<Eigen::Index>(i) * seq_len, seq_len) = d.eps;
    const bool drop = opt.drop_prob > 0 && dit::drop_condition(key, 0, 0, opt.drop_prob);
    b.conds.push_back(drop ? null_cond : conds[i]);
  }
  return b;
}

Var df_training_loss(Tape& tape, const Predictor& model, const DfBatch& batch) {
  Var pred = model(tape, batch);
  if (pred.rows() != batch.eps.rows() || pred.cols() != batch.eps.cols()) {
    throw ShapeError("df_training_loss: prediction shape differs from the noise");
  }
  return nn::mean(nn::square(nn::sub(pred, tape.constant(batch.eps))));
}

Predictor dit_predictor(const nn::ParamTree& params, const dit::DitConfig& cfg) {
  return [&params, cfg](Tape& tape, const DfBatch& b) {
    return dit::dit_forward_graph(tape, params, cfg, b.z_tilde, b.train_levels, b.conds, b.seq_len);
  };
}

}  // namespace cmdm::diffusion
