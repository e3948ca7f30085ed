#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "modeforge/checkpoint.hpp"
#include "modeforge/ops.hpp"

namespace modeforge {

struct CfreConfig {
  int in_channels = 2;  // 2 for raw IQ, 2k for k modes
  int width1 = 32;
  int width2 = 48;
  int d_model = 64;
  int kernel_t = 3;
  int kernel_f = 15;
  int dilation = 2;  // middle block only
};

struct TdseConfig {
  int layers = 2;
  int heads = 4;
  int d_model = 64;
  int d_ff = 128;
  double dropout = 0.1;
  int max_len = 256;
};

struct MlfeConfig {
  int layers = 1;
  int d_model = 64;
  int d_state = 16;
  int conv_kernel = 4;
  int expand = 2;
};

enum class EncoderMode { Tdse, Mlfe };

std::string to_string(EncoderMode mode);
EncoderMode parse_encoder_mode(const std::string& s);

struct ModelConfig {
  EncoderMode mode = EncoderMode::Tdse;
  CfreConfig cfre;
  TdseConfig tdse;
  MlfeConfig mlfe;
  int n_classes = 2;

  /// Keeps d_model identical across the three parts.
  void set_d_model(int d);
};

void validate(const CfreConfig& c);
void validate(const TdseConfig& c);
void validate(const MlfeConfig& c);
void validate(const ModelConfig& c);

nlohmann::ordered_json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Reduced widths for single-core runs: d_m 16, CFRE 8/12, one TDSE layer
/// with 2 heads and d_ff 32, d_state 8.
ModelConfig desk_model_config(int n_classes, int in_channels, EncoderMode mode = EncoderMode::Tdse);

// ---- CFRE -------------------------------------------------------------------

struct ResBlockParams {
  Tensor conv_t_w, conv_t_b;  // (c_out, c_in, k_t)
  Tensor conv_f_w, conv_f_b;  // (c_out, c_in, k_f)
  Tensor bn_gamma, bn_beta;
  BatchNormStats bn;
  Tensor shortcut_w, shortcut_b;  // 1x1 conv; undefined when c_in == c_out
  int dilation = 1;
};

ResBlockParams make_res_block(ParamStore& store, const std::string& prefix, int c_in, int c_out,
                              int kernel_t, int kernel_f, int dilation, std::mt19937_64& rng);

/// ReLU(BN(conv_t(x) + conv_f(x))) + shortcut(x); x (b, c_in, T).
Tensor res_conv1d_forward(const Tensor& x, ResBlockParams& p, bool training);

struct CfreParams {
  std::vector<ResBlockParams> blocks;
};

CfreParams make_cfre(ParamStore& store, const CfreConfig& c, std::mt19937_64& rng);

/// x (b, T, c) -> (b, T, d_model).
Tensor cfre_forward(const Tensor& x, const CfreConfig& c, CfreParams& p, bool training);

// ---- attention encoder ------------------------------------------------------

struct AttentionLayerParams {
  Tensor wq, wk, wv, wo;  // (d, d), no bias
  Tensor ln1_g, ln1_b;
  Tensor ff1_w, ff1_b, ff2_w, ff2_b;
  Tensor ln2_g, ln2_b;
};

struct TdseParams {
  Tensor positions;  // (1, max_len, d)
  Tensor cls_token;  // (1, 1, d)
  std::vector<AttentionLayerParams> layers;
};

TdseParams make_tdse(ParamStore& store, const TdseConfig& c, std::mt19937_64& rng);

struct EncoderOutput {
  Tensor encoded;  // (b, T + 1, d) for attention, (b, T, d) for state space
  Tensor token;    // (b, d)
  std::vector<Tensor> attention;  // per layer, (b, H, T + 1, T + 1)
};

/// Multi-head self-attention without biases. Returns the projected output and
/// stores the softmax maps in `maps` when given.
Tensor multi_head_attention(const Tensor& x, const AttentionLayerParams& p, int heads, Tensor* maps = nullptr);

/// `rng` drives dropout and may be null when not training.
EncoderOutput tdse_forward(const Tensor& x_feat, const TdseConfig& c, const TdseParams& p, bool training,
                           std::mt19937_64* rng);

// ---- selective state-space encoder -----------------------------------------

struct MambaLayerParams {
  Tensor in_w;                // (d, 2E): x path and gate path
  Tensor conv_w, conv_b;      // depthwise causal conv, (E, 1, k_c)
  Tensor x_proj_w, x_proj_b;  // (E, E + 2N) -> delta, B, C
  Tensor a_log;               // (E, N); A = -exp(a_log)
  Tensor d_skip;              // (E)
  Tensor out_w;               // (E, d)
};

struct MlfeParams {
  std::vector<MambaLayerParams> layers;
};

MlfeParams make_mlfe(ParamStore& store, const MlfeConfig& c, std::mt19937_64& rng);

/// x (b, T, d) -> encoded (b, T, d), token = mean over T.
EncoderOutput mlfe_forward(const Tensor& x_feat, const MlfeConfig& c, const MlfeParams& p);

// ---- head and full model ----------------------------------------------------

/// logits = x_co W + b; x_co (b, d), W (d, n_c), b (n_c).
Tensor closed_head(const Tensor& x_co, const Tensor& w, const Tensor& b);

class FingerprintNet {
 public:
  FingerprintNet(const ModelConfig& config, std::uint64_t seed);

  struct Output {
    Tensor logits;
    Tensor features;
    EncoderOutput encoder;
  };

  /// x (b, T, c).
  Output forward(const Tensor& x, bool training);
  Tensor logits(const Tensor& x, bool training) { return forward(x, training).logits; }

  const ModelConfig& config() const { return config_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }

  CfreParams& cfre() { return cfre_; }
  TdseParams& tdse() { return tdse_; }
  MlfeParams& mlfe() { return mlfe_; }
  Tensor head_w() const { return head_w_; }
  Tensor head_b() const { return head_b_; }

  void reseed_dropout(std::uint64_t seed) { dropout_rng_.seed(seed); }

 private:
  ModelConfig config_;
  ParamStore store_;
  CfreParams cfre_;
  TdseParams tdse_;
  MlfeParams mlfe_;
  Tensor head_w_, head_b_;
  std::mt19937_64 dropout_rng_;
};

/// Writes `<path>` (tensors) and `<path>.json` (config sidecar with mode tag).
void save_model(const std::filesystem::path& path, const FingerprintNet& net,
                const nlohmann::ordered_json& extra = {});
/// Rebuilds the network from the sidecar and loads its tensors.
FingerprintNet load_model(const std::filesystem::path& path, nlohmann::json* sidecar = nullptr);

}  // namespace modeforge
