#include "modeforge/model.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

namespace modeforge {

namespace {

constexpr double kInitStd = 0.02;

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

}  // namespace

std::string to_string(EncoderMode mode) { return mode == EncoderMode::Tdse ? "tdse" : "mlfe"; }

EncoderMode parse_encoder_mode(const std::string& s) {
  if (s == "tdse" || s == "TDSE") return EncoderMode::Tdse;
  if (s == "mlfe" || s == "MLFE") return EncoderMode::Mlfe;
  throw std::invalid_argument("unknown encoder mode '" + s + "' (expected tdse or mlfe)");
}

void ModelConfig::set_d_model(int d) {
  cfre.d_model = d;
  tdse.d_model = d;
  mlfe.d_model = d;
}

ModelConfig desk_model_config(int n_classes, int in_channels, EncoderMode mode) {
  ModelConfig c;
  c.mode = mode;
  c.n_classes = n_classes;
  c.cfre.in_channels = in_channels;
  c.cfre.width1 = 8;
  c.cfre.width2 = 12;
  c.tdse.layers = 1;
  c.tdse.heads = 2;
  c.tdse.d_ff = 32;
  c.mlfe.d_state = 8;
  c.set_d_model(16);
  return c;
}

void validate(const CfreConfig& c) {
  require(c.in_channels >= 1, "CFRE in_channels must be >= 1");
  require(c.width1 >= 1 && c.width2 >= 1 && c.d_model >= 1, "CFRE widths must be >= 1");
  require(c.kernel_t >= 1 && c.kernel_t % 2 == 1, "CFRE temporal kernel must be odd");
  require(c.kernel_f >= 1 && c.kernel_f % 2 == 1, "CFRE frequency kernel must be odd");
  require(c.dilation >= 1, "CFRE dilation must be >= 1");
}

void validate(const TdseConfig& c) {
  require(c.layers >= 1, "TDSE needs at least one layer");
  require(c.heads >= 1 && c.d_model % c.heads == 0, "TDSE d_model must be divisible by the head count");
  require(c.d_ff >= 1, "TDSE d_ff must be >= 1");
  require(c.dropout >= 0.0 && c.dropout < 1.0, "TDSE dropout must be in [0, 1)");
  require(c.max_len >= 1, "TDSE max_len must be >= 1");
}

void validate(const MlfeConfig& c) {
  require(c.layers >= 1, "MLFE needs at least one layer");
  require(c.d_model >= 1 && c.d_state >= 1, "MLFE dimensions must be >= 1");
  require(c.conv_kernel >= 1, "MLFE conv kernel must be >= 1");
  require(c.expand >= 1, "MLFE expansion must be >= 1");
}

void validate(const ModelConfig& c) {
  validate(c.cfre);
  require(c.n_classes >= 1, "model needs at least one class");
  if (c.mode == EncoderMode::Tdse) {
    validate(c.tdse);
    require(c.tdse.d_model == c.cfre.d_model, "TDSE and CFRE d_model differ");
  } else {
    validate(c.mlfe);
    require(c.mlfe.d_model == c.cfre.d_model, "MLFE and CFRE d_model differ");
  }
}

nlohmann::ordered_json to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["mode"] = to_string(c.mode);
  j["n_classes"] = c.n_classes;
  j["cfre"] = {{"in_channels", c.cfre.in_channels}, {"width1", c.cfre.width1}, {"width2", c.cfre.width2},
               {"d_model", c.cfre.d_model},         {"kernel_t", c.cfre.kernel_t}, {"kernel_f", c.cfre.kernel_f},
               {"dilation", c.cfre.dilation}};
  j["tdse"] = {{"layers", c.tdse.layers}, {"heads", c.tdse.heads},     {"d_model", c.tdse.d_model},
               {"d_ff", c.tdse.d_ff},     {"dropout", c.tdse.dropout}, {"max_len", c.tdse.max_len}};
  j["mlfe"] = {{"layers", c.mlfe.layers},
               {"d_model", c.mlfe.d_model},
               {"d_state", c.mlfe.d_state},
               {"conv_kernel", c.mlfe.conv_kernel},
               {"expand", c.mlfe.expand}};
  return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.mode = parse_encoder_mode(j.at("mode").get<std::string>());
  c.n_classes = j.at("n_classes").get<int>();
  const auto& f = j.at("cfre");
  c.cfre = {f.at("in_channels").get<int>(), f.at("width1").get<int>(),   f.at("width2").get<int>(),
            f.at("d_model").get<int>(),     f.at("kernel_t").get<int>(), f.at("kernel_f").get<int>(),
            f.at("dilation").get<int>()};
  const auto& t = j.at("tdse");
  c.tdse = {t.at("layers").get<int>(), t.at("heads").get<int>(),      t.at("d_model").get<int>(),
            t.at("d_ff").get<int>(),   t.at("dropout").get<double>(), t.at("max_len").get<int>()};
  const auto& m = j.at("mlfe");
  c.mlfe = {m.at("layers").get<int>(), m.at("d_model").get<int>(), m.at("d_state").get<int>(),
            m.at("conv_kernel").get<int>(), m.at("expand").get<int>()};
  validate(c);
  return c;
}

ResBlockParams make_res_block(ParamStore& store, const std::string& prefix, int c_in, int c_out, int kernel_t,
                              int kernel_f, int dilation, std::mt19937_64& rng) {
  ResBlockParams p;
  p.dilation = dilation;
  p.conv_t_w = store.normal(prefix + ".conv_t.weight", {c_out, c_in, kernel_t}, kInitStd, rng);
  p.conv_t_b = store.constant(prefix + ".conv_t.bias", {c_out}, 0.0);
  p.conv_f_w = store.normal(prefix + ".conv_f.weight", {c_out, c_in, kernel_f}, kInitStd, rng);
  p.conv_f_b = store.constant(prefix + ".conv_f.bias", {c_out}, 0.0);
  p.bn_gamma = store.constant(prefix + ".bn.weight", {c_out}, 1.0);
  p.bn_beta = store.constant(prefix + ".bn.bias", {c_out}, 0.0);
  p.bn.mean = store.buffer(prefix + ".bn.running_mean", {c_out}, 0.0);
  p.bn.var = store.buffer(prefix + ".bn.running_var", {c_out}, 1.0);
  if (c_in != c_out) {
    p.shortcut_w = store.normal(prefix + ".shortcut.weight", {c_out, c_in, 1}, kInitStd, rng);
    p.shortcut_b = store.constant(prefix + ".shortcut.bias", {c_out}, 0.0);
  }
  return p;
}

Tensor res_conv1d_forward(const Tensor& x, ResBlockParams& p, bool training) {
  const Eigen::Index kt = p.conv_t_w.dim(2);
  const Eigen::Index kf = p.conv_f_w.dim(2);
  const Eigen::Index pad_t = (kt / 2) * p.dilation;
  const Eigen::Index pad_f = kf / 2;
  if (x.dim(1) != p.conv_t_w.dim(1)) {
    throw std::invalid_argument("ResConv1d: input has " + std::to_string(x.dim(1)) + " channels, block expects " +
                                std::to_string(p.conv_t_w.dim(1)));
  }
  const Tensor t = conv1d(x, p.conv_t_w, p.conv_t_b, {.dilation = p.dilation, .pad_left = pad_t, .pad_right = pad_t});
  const Tensor f = conv1d(x, p.conv_f_w, p.conv_f_b, {.pad_left = pad_f, .pad_right = pad_f});
  const Tensor main = relu(batchnorm1d(add(t, f), p.bn_gamma, p.bn_beta, p.bn, training));
  const Tensor skip = p.shortcut_w.defined() ? conv1d(x, p.shortcut_w, p.shortcut_b) : x;
  return add(main, skip);
}

CfreParams make_cfre(ParamStore& store, const CfreConfig& c, std::mt19937_64& rng) {
  validate(c);
  CfreParams p;
  p.blocks.push_back(make_res_block(store, "cfre.0", c.in_channels, c.width1, c.kernel_t, c.kernel_f, 1, rng));
  p.blocks.push_back(make_res_block(store, "cfre.1", c.width1, c.width2, c.kernel_t, c.kernel_f, c.dilation, rng));
  p.blocks.push_back(make_res_block(store, "cfre.2", c.width2, c.d_model, c.kernel_t, c.kernel_f, 1, rng));
  return p;
}

Tensor cfre_forward(const Tensor& x, const CfreConfig& c, CfreParams& p, bool training) {
  if (x.rank() != 3 || x.dim(2) != c.in_channels) {
    throw std::invalid_argument("CFRE expects (b, T, " + std::to_string(c.in_channels) + ") input, got " +
                                shape_string(x.shape()));
  }
  Tensor h = permute(x, {0, 2, 1});
  for (auto& block : p.blocks) h = res_conv1d_forward(h, block, training);
  return permute(h, {0, 2, 1});
}

TdseParams make_tdse(ParamStore& store, const TdseConfig& c, std::mt19937_64& rng) {
  validate(c);
  TdseParams p;
  const int d = c.d_model;
  p.positions = store.normal("tdse.positions", {1, c.max_len, d}, kInitStd, rng);
  p.cls_token = store.normal("tdse.cls_token", {1, 1, d}, kInitStd, rng);
  for (int l = 0; l < c.layers; ++l) {
    const std::string pre = "tdse.layer" + std::to_string(l);
    AttentionLayerParams a;
    a.wq = store.normal(pre + ".attn.wq", {d, d}, kInitStd, rng);
    a.wk = store.normal(pre + ".attn.wk", {d, d}, kInitStd, rng);
    a.wv = store.normal(pre + ".attn.wv", {d, d}, kInitStd, rng);
    a.wo = store.normal(pre + ".attn.wo", {d, d}, kInitStd, rng);
    a.ln1_g = store.constant(pre + ".norm1.weight", {d}, 1.0);
    a.ln1_b = store.constant(pre + ".norm1.bias", {d}, 0.0);
    a.ff1_w = store.normal(pre + ".ff1.weight", {d, c.d_ff}, kInitStd, rng);
    a.ff1_b = store.constant(pre + ".ff1.bias", {c.d_ff}, 0.0);
    a.ff2_w = store.normal(pre + ".ff2.weight", {c.d_ff, d}, kInitStd, rng);
    a.ff2_b = store.constant(pre + ".ff2.bias", {d}, 0.0);
    a.ln2_g = store.constant(pre + ".norm2.weight", {d}, 1.0);
    a.ln2_b = store.constant(pre + ".norm2.bias", {d}, 0.0);
    p.layers.push_back(std::move(a));
  }
  return p;
}

Tensor multi_head_attention(const Tensor& x, const AttentionLayerParams& p, int heads, Tensor* maps) {
  const Tensor ctx = attention(matmul(x, p.wq), matmul(x, p.wk), matmul(x, p.wv), heads, maps);
  return matmul(ctx, p.wo);
}

EncoderOutput tdse_forward(const Tensor& x_feat, const TdseConfig& c, const TdseParams& p, bool training,
                           std::mt19937_64* rng) {
  if (x_feat.rank() != 3 || x_feat.dim(2) != c.d_model) {
    throw std::invalid_argument("TDSE expects (b, T, d_model) input, got " + shape_string(x_feat.shape()));
  }
  const Eigen::Index b = x_feat.dim(0), len = x_feat.dim(1);
  if (len > c.max_len) {
    throw std::invalid_argument("sequence length " + std::to_string(len) + " exceeds TDSE max_len " +
                                std::to_string(c.max_len));
  }
  const bool drop = training && c.dropout > 0.0;
  if (drop && !rng) throw std::invalid_argument("TDSE dropout needs a random generator in training mode");
  std::mt19937_64 unused;
  std::mt19937_64& gen = rng ? *rng : unused;

  const Tensor pos = add(x_feat, slice(p.positions, 1, 0, len));
  const Tensor cls = broadcast_to(p.cls_token, {b, 1, c.d_model});
  Tensor h = concat({cls, pos}, 1);
  EncoderOutput out;
  for (const auto& layer : p.layers) {
    Tensor maps;
    const Tensor attn = dropout(multi_head_attention(h, layer, c.heads, &maps), c.dropout, drop, gen);
    h = layernorm(add(h, attn), layer.ln1_g, layer.ln1_b);
    const Tensor ff = linear(gelu(linear(h, layer.ff1_w, layer.ff1_b)), layer.ff2_w, layer.ff2_b);
    h = layernorm(add(h, dropout(ff, c.dropout, drop, gen)), layer.ln2_g, layer.ln2_b);
    out.attention.push_back(maps);
  }
  out.encoded = h;
  out.token = select(h, 1, 0);
  return out;
}

MlfeParams make_mlfe(ParamStore& store, const MlfeConfig& c, std::mt19937_64& rng) {
  validate(c);
  MlfeParams p;
  const int d = c.d_model;
  const int e = c.expand * d;
  const int n = c.d_state;
  for (int l = 0; l < c.layers; ++l) {
    const std::string pre = "mlfe.layer" + std::to_string(l);
    MambaLayerParams m;
    m.in_w = store.normal(pre + ".in_proj.weight", {d, 2 * e}, kInitStd, rng);
    m.conv_w = store.normal(pre + ".conv.weight", {e, 1, c.conv_kernel}, kInitStd, rng);
    m.conv_b = store.constant(pre + ".conv.bias", {e}, 0.0);
    m.x_proj_w = store.normal(pre + ".x_proj.weight", {e, e + 2 * n}, kInitStd, rng);
    // Step-size bias: softplus^-1 of a log-uniform draw in [1e-3, 1e-1].
    Eigen::ArrayXd bias = Eigen::ArrayXd::Zero(e + 2 * n);
    std::uniform_real_distribution<double> u(std::log(1e-3), std::log(1e-1));
    for (int i = 0; i < e; ++i) {
      const double dt = std::exp(u(rng));
      bias[i] = dt + std::log(-std::expm1(-dt));
    }
    m.x_proj_b = store.from(pre + ".x_proj.bias", {e + 2 * n}, bias);
    Eigen::ArrayXd a_log(e * n);
    for (int ch = 0; ch < e; ++ch) {
      for (int s = 0; s < n; ++s) a_log[ch * n + s] = std::log(static_cast<double>(s + 1));
    }
    m.a_log = store.from(pre + ".a_log", {e, n}, a_log);
    m.d_skip = store.constant(pre + ".d_skip", {e}, 1.0);
    m.out_w = store.normal(pre + ".out_proj.weight", {e, d}, kInitStd, rng);
    p.layers.push_back(std::move(m));
  }
  return p;
}

EncoderOutput mlfe_forward(const Tensor& x_feat, const MlfeConfig& c, const MlfeParams& p) {
  if (x_feat.rank() != 3 || x_feat.dim(2) != c.d_model) {
    throw std::invalid_argument("MLFE expects (b, T, d_model) input, got " + shape_string(x_feat.shape()));
  }
  const Eigen::Index e = static_cast<Eigen::Index>(c.expand) * c.d_model;
  const Eigen::Index n = c.d_state;
  Tensor h = x_feat;
  for (const auto& m : p.layers) {
    const Tensor xz = matmul(h, m.in_w);
    const Tensor xs = slice(xz, 2, 0, e);
    const Tensor z = slice(xz, 2, e, e);
    // Causal depthwise conv over time: left padding only.
    const Tensor conv = conv1d(permute(xs, {0, 2, 1}), m.conv_w, m.conv_b,
                               {.pad_left = c.conv_kernel - 1, .groups = e});
    const Tensor u = silu(permute(conv, {0, 2, 1}));
    const Tensor proj = linear(u, m.x_proj_w, m.x_proj_b);
    const Tensor delta = softplus(slice(proj, 2, 0, e));
    const Tensor bmat = slice(proj, 2, e, n);
    const Tensor cmat = slice(proj, 2, e + n, n);
    const Tensor a = scale(exp(m.a_log), -1.0);
    Tensor y = selective_scan(u, delta, a, bmat, cmat);
    y = add(y, mul(u, m.d_skip));
    y = mul(y, silu(z));
    h = add(h, matmul(y, m.out_w));
  }
  EncoderOutput out;
  out.encoded = h;
  out.token = mean(h, 1);
  return out;
}

Tensor closed_head(const Tensor& x_co, const Tensor& w, const Tensor& b) {
  if (x_co.rank() != 2 || w.rank() != 2 || x_co.dim(1) != w.dim(0) || b.numel() != w.dim(1)) {
    throw std::invalid_argument("closed head: x_co " + shape_string(x_co.shape()) + ", W " + shape_string(w.shape()) +
                                ", b " + shape_string(b.shape()) + " do not agree");
  }
  return linear(x_co, w, b);
}

FingerprintNet::FingerprintNet(const ModelConfig& config, std::uint64_t seed)
    : config_(config), dropout_rng_(seed ^ 0x9e3779b97f4a7c15ULL) {
  validate(config_);
  std::mt19937_64 rng(seed);
  cfre_ = make_cfre(store_, config_.cfre, rng);
  if (config_.mode == EncoderMode::Tdse) {
    tdse_ = make_tdse(store_, config_.tdse, rng);
  } else {
    mlfe_ = make_mlfe(store_, config_.mlfe, rng);
  }
  head_w_ = store_.normal("head.weight", {config_.cfre.d_model, config_.n_classes}, kInitStd, rng);
  head_b_ = store_.constant("head.bias", {config_.n_classes}, 0.0);
}

FingerprintNet::Output FingerprintNet::forward(const Tensor& x, bool training) {
  Output out;
  out.features = cfre_forward(x, config_.cfre, cfre_, training);
  if (config_.mode == EncoderMode::Tdse) {
    out.encoder = tdse_forward(out.features, config_.tdse, tdse_, training, &dropout_rng_);
  } else {
    out.encoder = mlfe_forward(out.features, config_.mlfe, mlfe_);
  }
  out.logits = closed_head(out.encoder.token, head_w_, head_b_);
  return out;
}

void save_model(const std::filesystem::path& path, const FingerprintNet& net, const nlohmann::ordered_json& extra) {
  save_checkpoint(path, net.params());
  nlohmann::ordered_json side;
  side["format"] = "modeforge-model";
  side["model"] = to_json(net.config());
  side["parameter_count"] = net.params().parameter_count();
  if (!extra.is_null()) side["extra"] = extra;
  std::ofstream out(path.string() + ".json");
  if (!out) throw CheckpointError("cannot write model sidecar for " + path.string());
  out << side.dump(2) << '\n';
}

FingerprintNet load_model(const std::filesystem::path& path, nlohmann::json* sidecar) {
  std::ifstream in(path.string() + ".json");
  if (!in) throw CheckpointError("missing model sidecar " + path.string() + ".json");
  nlohmann::json side;
  try {
    side = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("model sidecar is not valid JSON: ") + e.what());
  }
  FingerprintNet net(model_config_from_json(side.at("model")), 0);
  load_checkpoint(path, net.params());
  if (sidecar) *sidecar = side;
  return net;
}

}  // namespace modeforge
