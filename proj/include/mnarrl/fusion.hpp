#pragma once

// Sparse text fusion: a documentation-process factor driven only by note
// presence, recency and density, cross-attention from the structured
// embedding onto note embeddings, and a gated residual combination.

#include "mnarrl/ad.hpp"
#include "mnarrl/cohort.hpp"
#include "mnarrl/nn.hpp"

#include <vector>

namespace mnarrl::fusion {

using ad::Matrix;
using ad::Var;

struct FusionDims {
  int hidden = 128;
  int text_modalities = 2;
  int embed_dim = 8;
  int max_notes = 4;
  int attention_dim = 128;
  int heads = 4;
  bool doc_factor = true;    // off: F^doc is routed as zeros
  bool text_channel = true;  // off: attended text embedding is zeros

  int process_width() const { return text_modalities + 2; }
  int key_slots() const { return text_modalities * max_notes; }
};

struct FusionParams {
  FusionParams() = default;
  FusionParams(const FusionDims& dims, Rng& rng);

  FusionDims dims;
  nn::Mlp doc_mlp;     // (m, delta, kappa) -> eta
  nn::GruCell doc_gru;  // eta -> F^doc
  nn::Linear query;    // hidden -> attention
  nn::Linear key;      // embed -> attention
  nn::Linear value;    // embed -> attention
  nn::Linear output;   // attention -> hidden
  Var missing_embedding;  // [M x d_e]
  Var doc_projection;     // W_d [hidden x hidden]
  nn::Linear gate;        // [phi_s; phi_t_hat; F] -> hidden
  nn::LayerNorm norm;

  void register_parameters(const std::string& prefix, nn::ParameterList& list) const;
};

// Process features [m^t; z(delta^t); z(kappa^t)] for one step.
Eigen::RowVectorXd process_features(const sim::StepObservation& step,
                                    const sim::NormalizationStats& stats);

struct DocStep {
  Var eta;  // [B x hidden]
  Var doc;  // F^doc [B x hidden]
};

DocStep doc_process_step(const Var& previous_doc, const Matrix& process, const FusionParams& params);

// Attention inputs for a batch. Slot s of sample b sits at row b*S + s of
// `embeddings`; slots of an absent modality take the learned missing
// embedding through `missing_select` (one-hot over modalities).
struct TextKeys {
  Matrix embeddings;      // [B*S x d_e], zero where substituted or padded
  Matrix missing_select;  // [B*S x M]
  Matrix key_mask;        // [B x S]
};

TextKeys make_text_keys(const std::vector<const sim::StepObservation*>& steps,
                        const FusionDims& dims);

Var cross_attend(const Var& structured, const TextKeys& keys, const FusionParams& params,
                 Matrix* weights_out = nullptr);

struct FuseResult {
  Var fused;  // phi [B x hidden]
  Var gate;   // g [B x hidden]
};

FuseResult fuse(const Var& structured, const Var& text, const Var& doc, const FusionParams& params);

}  // namespace mnarrl::fusion
