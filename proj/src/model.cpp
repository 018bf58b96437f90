#include "xattn/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "xattn/errors.hpp"
#include "xattn/ops.hpp"
#include "xattn/rng.hpp"

namespace xattn {
namespace {

std::string itos(int v) { return std::to_string(v); }

// FNV-1a, 64 bit.
struct Fnv1a {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  }
};

enum class InitKind { normal_embed, normal_small, linear, ones, zeros };

InitKind init_kind(const std::string& name) {
  auto ends_with = [&](const char* suffix) {
    const std::size_t n = std::strlen(suffix);
    return name.size() >= n && name.compare(name.size() - n, n, suffix) == 0;
  };
  if (name == "text.embed" || name.rfind("audio.embed", 0) == 0) return InitKind::normal_embed;
  if (name == "text.pos" || name == "audio.pos") return InitKind::normal_small;
  if (ends_with(".g")) return InitKind::ones;
  if (ends_with(".b") || ends_with("b1") || ends_with("b2")) return InitKind::zeros;
  return InitKind::linear;
}

void init_tensor(Tensor& t, InitKind kind, RngStream& rng) {
  switch (kind) {
    case InitKind::normal_embed:
      for (double& v : t.data()) v = rng.normal();
      break;
    case InitKind::normal_small:
      for (double& v : t.data()) v = 0.3 * rng.normal();
      break;
    case InitKind::linear: {
      const double bound = 1.0 / std::sqrt(static_cast<double>(t.rows()));
      for (double& v : t.data()) v = (2.0 * rng.uniform() - 1.0) * bound;
      break;
    }
    case InitKind::ones:
      t.fill(1.0);
      break;
    case InitKind::zeros:
      t.fill(0.0);
      break;
  }
}

bool is_text_encoder(const std::string& name) { return name == "text.embed" || name == "text.pos"; }

}  // namespace

void ModelConfig::validate() const {
  auto positive = [](int v, const char* field) {
    if (v < 1) throw ParameterError(std::string("model config: ") + field + " must be >= 1");
  };
  positive(text_vocab, "text_vocab");
  positive(audio_vocab, "audio_vocab");
  positive(d_text, "d_text");
  positive(d_model, "d_model");
  positive(n_layers, "n_layers");
  positive(n_heads, "n_heads");
  positive(d_head, "d_head");
  positive(d_ff, "d_ff");
  positive(n_codebooks, "n_codebooks");
  positive(max_seq_len, "max_seq_len");
  positive(max_prompt_len, "max_prompt_len");
  if (d_model != n_heads * d_head) {
    throw ParameterError("model config: d_model must equal n_heads * d_head");
  }
  if (latent_layer < 0 || latent_layer > n_layers) {
    throw ParameterError("model config: latent_layer must lie in [0, n_layers]");
  }
}

AudioSequence AudioSequence::prefix(std::size_t n) const {
  AudioSequence out;
  for (const auto& cb : codebooks) {
    if (n > cb.size()) throw ContractError("prefix longer than the sequence");
    out.codebooks.emplace_back(cb.begin(), cb.begin() + static_cast<std::ptrdiff_t>(n));
  }
  return out;
}

void AudioSequence::validate(int audio_vocab) const {
  for (const auto& cb : codebooks) {
    if (cb.size() != length()) throw ContractError("codebooks have unequal lengths");
    for (int id : cb) {
      if (id < 0 || id >= audio_vocab) {
        throw VocabularyError("audio token " + std::to_string(id) + " outside [0, " +
                              std::to_string(audio_vocab) + ")");
      }
    }
  }
}

void Model::build_layout(std::vector<std::pair<std::size_t, std::size_t>>* shapes) {
  const ModelConfig& c = config_;
  names_.clear();
  index_ = Index{};
  std::vector<std::pair<std::size_t, std::size_t>> dims;
  auto add = [&](const std::string& name, int rows, int cols) {
    names_.push_back(name);
    dims.emplace_back(rows, cols);
    return names_.size() - 1;
  };
  const int inner = c.n_heads * c.d_head;
  index_.text_embed = add("text.embed", c.text_vocab, c.d_text);
  index_.text_pos = add("text.pos", c.max_prompt_len, c.d_text);
  for (int cb = 0; cb < c.n_codebooks; ++cb) {
    index_.audio_embed.push_back(add("audio.embed." + itos(cb), c.audio_vocab + 1, c.d_model));
  }
  index_.audio_pos = add("audio.pos", c.max_seq_len, c.d_model);
  for (int l = 0; l < c.n_layers; ++l) {
    const std::string p = "layer" + itos(l) + ".";
    LayerIndex li{};
    li.ln1_g = add(p + "ln1.g", 1, c.d_model);
    li.ln1_b = add(p + "ln1.b", 1, c.d_model);
    li.self_q = add(p + "self.q", c.d_model, inner);
    li.self_k = add(p + "self.k", c.d_model, inner);
    li.self_v = add(p + "self.v", c.d_model, inner);
    li.self_o = add(p + "self.o", inner, c.d_model);
    li.ln2_g = add(p + "ln2.g", 1, c.d_model);
    li.ln2_b = add(p + "ln2.b", 1, c.d_model);
    li.cross_q = add(p + "cross.q", c.d_model, inner);
    li.cross_k = add(p + "cross.k", c.d_text, inner);
    li.cross_v = add(p + "cross.v", c.d_text, inner);
    li.cross_o = add(p + "cross.o", inner, c.d_model);
    li.ln3_g = add(p + "ln3.g", 1, c.d_model);
    li.ln3_b = add(p + "ln3.b", 1, c.d_model);
    li.ff_w1 = add(p + "ff.w1", c.d_model, c.d_ff);
    li.ff_b1 = add(p + "ff.b1", 1, c.d_ff);
    li.ff_w2 = add(p + "ff.w2", c.d_ff, c.d_model);
    li.ff_b2 = add(p + "ff.b2", 1, c.d_model);
    index_.layers.push_back(li);
  }
  index_.final_g = add("final.ln.g", 1, c.d_model);
  index_.final_b = add("final.ln.b", 1, c.d_model);
  for (int cb = 0; cb < c.n_codebooks; ++cb) {
    index_.head_w.push_back(add("head." + itos(cb) + ".w", c.d_model, c.audio_vocab));
    index_.head_b.push_back(add("head." + itos(cb) + ".b", 1, c.audio_vocab));
  }
  if (shapes != nullptr) *shapes = std::move(dims);
}

Model Model::initialize(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model m;
  m.config_ = config;
  std::vector<std::pair<std::size_t, std::size_t>> shapes;
  m.build_layout(&shapes);
  RngStream rng(seed);
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    Tensor t(shapes[i].first, shapes[i].second);
    init_tensor(t, init_kind(m.names_[i]), rng);
    m.params_.push_back(std::move(t));
  }
  return m;
}

Model Model::from_parameters(const ModelConfig& config, std::vector<std::string> names,
                             std::vector<Tensor> params) {
  config.validate();
  Model m;
  m.config_ = config;
  std::vector<std::pair<std::size_t, std::size_t>> shapes;
  m.build_layout(&shapes);
  if (names != m.names_ || params.size() != shapes.size()) {
    throw ContractError("stored parameters do not match the model layout");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].rows() != shapes[i].first || params[i].cols() != shapes[i].second) {
      throw DimensionError("parameter " + names[i] + " has shape " + params[i].shape_string());
    }
  }
  m.params_ = std::move(params);
  return m;
}

std::size_t Model::param_index(const std::string& name) const {
  const auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) throw ContractError("unknown parameter " + name);
  return static_cast<std::size_t>(it - names_.begin());
}

const Tensor& Model::param(const std::string& name) const { return params_[param_index(name)]; }
Tensor& Model::param(const std::string& name) { return params_[param_index(name)]; }

Model Model::with_randomized_decoder(std::uint64_t seed) const {
  Model m = *this;
  RngStream rng(seed);
  for (std::size_t i = 0; i < m.params_.size(); ++i) {
    if (is_text_encoder(m.names_[i])) continue;
    init_tensor(m.params_[i], init_kind(m.names_[i]), rng);
  }
  return m;
}

std::string Model::checksum() const {
  Fnv1a f;
  const int fields[] = {config_.text_vocab, config_.audio_vocab,  config_.d_text,
                        config_.d_model,    config_.n_layers,     config_.n_heads,
                        config_.d_head,     config_.d_ff,         config_.n_codebooks,
                        config_.max_seq_len, config_.max_prompt_len, config_.latent_layer};
  f.bytes(fields, sizeof(fields));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    f.bytes(names_[i].data(), names_[i].size());
    f.bytes(params_[i].data().data(), params_[i].size() * sizeof(double));
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(f.h));
  return buf;
}

BoundModel BoundModel::frozen(const Model& model, Tape& tape) {
  BoundModel b;
  b.model = &model;
  b.vars.reserve(model.parameters().size());
  for (const Tensor& p : model.parameters()) b.vars.push_back(tape.constant_ref(p));
  return b;
}

BoundModel BoundModel::trainable(const Model& model, Tape& tape) {
  BoundModel b;
  b.model = &model;
  b.vars.reserve(model.parameters().size());
  for (const Tensor& p : model.parameters()) b.vars.push_back(tape.parameter(p));
  return b;
}

const Var& BoundModel::operator[](const std::string& name) const {
  return vars[model->param_index(name)];
}

namespace {

void check_prompt_ids(const ModelConfig& c, std::span<const int> ids) {
  if (ids.empty()) throw ContractError("prompt must contain at least one token");
  if (static_cast<int>(ids.size()) > c.max_prompt_len) {
    throw CapacityError("prompt of " + std::to_string(ids.size()) + " tokens exceeds max " +
                        std::to_string(c.max_prompt_len));
  }
  for (int id : ids) {
    if (id < 0 || id >= c.text_vocab) {
      throw VocabularyError("text token " + std::to_string(id) + " outside vocabulary of " +
                            std::to_string(c.text_vocab));
    }
  }
}

}  // namespace

PromptEmbedding encode_text(const Model& model, std::span<const int> token_ids) {
  const ModelConfig& c = model.config();
  check_prompt_ids(c, token_ids);
  const Tensor& table = model.parameters()[model.index().text_embed];
  const Tensor& pos = model.parameters()[model.index().text_pos];
  Tensor rows(token_ids.size(), static_cast<std::size_t>(c.d_text));
  for (std::size_t i = 0; i < token_ids.size(); ++i)
    for (std::size_t j = 0; j < rows.cols(); ++j)
      rows(i, j) = table(token_ids[i], j) + pos(i, j);
  return PromptEmbedding{std::vector<int>(token_ids.begin(), token_ids.end()), std::move(rows)};
}

Var encode_text(const BoundModel& bound, std::span<const int> token_ids) {
  const Model& model = *bound.model;
  check_prompt_ids(model.config(), token_ids);
  const Var& table = bound.vars[model.index().text_embed];
  const Var& pos = bound.vars[model.index().text_pos];
  std::vector<int> positions(token_ids.size());
  std::iota(positions.begin(), positions.end(), 0);
  return ops::add(ops::gather_rows(table, token_ids), ops::gather_rows(pos, positions));
}

ForwardResult forward_latent(const BoundModel& bound, const Var& prompt,
                             const AudioSequence& prefix, const ForwardOptions& options) {
  const Model& model = *bound.model;
  const ModelConfig& c = model.config();
  const Model::Index& ix = model.index();
  Tape& tape = *prompt.tape();
  const auto& W = bound.vars;

  const std::size_t L = prompt.rows();
  if (prompt.cols() != static_cast<std::size_t>(c.d_text)) {
    throw DimensionError("prompt rows have width " + std::to_string(prompt.cols()) +
                         ", model expects " + std::to_string(c.d_text));
  }
  if (options.injection.mode != InjectionMode::none) {
    const Var& m = options.injection.mask;
    if (!m.valid() || m.rows() != 1 || m.cols() != L) {
      throw ContractError("injection mask must be 1x" + std::to_string(L) + ", got " +
                          (m.valid() ? m.value().shape_string() : std::string("unbound")));
    }
  }
  if (!options.pre_softmax_column_scale.empty() && options.pre_softmax_column_scale.size() != L) {
    throw ContractError("pre-softmax column scale must have one factor per prompt token");
  }
  const std::size_t steps = prefix.length() + 1;
  if (steps > static_cast<std::size_t>(c.max_seq_len)) {
    throw CapacityError("prefix of " + std::to_string(prefix.length()) +
                        " tokens exceeds max sequence length " + std::to_string(c.max_seq_len));
  }
  if (prefix.length() > 0 && prefix.n_codebooks() != static_cast<std::size_t>(c.n_codebooks)) {
    throw ContractError("prefix has " + std::to_string(prefix.n_codebooks()) +
                        " codebooks, model expects " + std::to_string(c.n_codebooks));
  }
  prefix.validate(c.audio_vocab);

  ForwardResult out;

  // Input embeddings: begin-of-sequence id is audio_vocab.
  std::vector<int> positions(steps);
  std::iota(positions.begin(), positions.end(), 0);
  Var x = ops::gather_rows(W[ix.audio_pos], positions);
  for (int cb = 0; cb < c.n_codebooks; ++cb) {
    std::vector<int> ids;
    ids.reserve(steps);
    ids.push_back(c.audio_vocab);
    if (prefix.length() > 0) {
      const auto& src = prefix.codebooks[cb];
      ids.insert(ids.end(), src.begin(), src.end());
    }
    x = ops::add(x, ops::gather_rows(W[ix.audio_embed[cb]], ids));
  }

  Var column_factor;
  if (options.injection.mode == InjectionMode::factual) {
    column_factor = options.injection.mask;
  } else if (options.injection.mode == InjectionMode::counterfactual) {
    column_factor = ops::one_minus(options.injection.mask);
  }
  Var pre_scale;
  if (!options.pre_softmax_column_scale.empty()) {
    pre_scale = tape.constant(Tensor::row_vector(options.pre_softmax_column_scale));
  }

  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(c.d_head));
  const std::size_t dk = static_cast<std::size_t>(c.d_head);
  const int latent_layer = c.latent_layer == 0 ? c.n_layers : c.latent_layer;
  if (options.capture_attention) {
    out.self_attention.resize(c.n_layers);
    out.cross_attention.resize(c.n_layers);
  }

  for (int l = 0; l < c.n_layers; ++l) {
    const Model::LayerIndex& li = ix.layers[l];

    // Causal self-attention over the audio positions.
    {
      const Var h = ops::layer_norm_rows(x, W[li.ln1_g], W[li.ln1_b]);
      const Var q = ops::matmul(h, W[li.self_q]);
      const Var k = ops::matmul(h, W[li.self_k]);
      const Var v = ops::matmul(h, W[li.self_v]);
      std::vector<Var> heads;
      for (int hd = 0; hd < c.n_heads; ++hd) {
        const std::size_t off = hd * dk;
        const Var scores = ops::scale(
            ops::matmul_nt(ops::slice_cols(q, off, dk), ops::slice_cols(k, off, dk)), inv_sqrt_dk);
        Var probs = ops::causal_softmax_rows(scores);
        if (options.capture_attention) {
          probs = ops::add(probs, tape.parameter(Tensor(probs.rows(), probs.cols())));
          out.self_attention[l].push_back(probs);
        }
        heads.push_back(ops::matmul(probs, ops::slice_cols(v, off, dk)));
      }
      x = ops::add(x, ops::matmul(ops::concat_cols(heads), W[li.self_o]));
    }

    // Cross-attention into the prompt rows; the only place text enters.
    {
      const Var h = ops::layer_norm_rows(x, W[li.ln2_g], W[li.ln2_b]);
      const Var q = ops::matmul(h, W[li.cross_q]);
      const Var k = ops::matmul(prompt, W[li.cross_k]);
      const Var v = ops::matmul(prompt, W[li.cross_v]);
      std::vector<Var> heads;
      for (int hd = 0; hd < c.n_heads; ++hd) {
        const std::size_t off = hd * dk;
        Var scores = ops::scale(
            ops::matmul_nt(ops::slice_cols(q, off, dk), ops::slice_cols(k, off, dk)), inv_sqrt_dk);
        if (pre_scale.valid()) scores = ops::scale_columns(scores, pre_scale);
        Var probs = ops::softmax_rows(scores);
        if (options.cross_probs_hook) {
          Tensor edited = probs.value();
          options.cross_probs_hook(l, hd, edited);
          probs = tape.constant(std::move(edited));
        }
        if (options.capture_attention) {
          probs = ops::add(probs, tape.parameter(Tensor(probs.rows(), probs.cols())));
          out.cross_attention[l].push_back(probs);
        }
        if (column_factor.valid()) {
          probs = ops::scale_columns(probs, column_factor);
          ++out.cross_heads_masked;
        }
        heads.push_back(ops::matmul(probs, ops::slice_cols(v, off, dk)));
      }
      if (column_factor.valid()) ++out.cross_layers_masked;
      if (!options.skip_cross_attention) {
        x = ops::add(x, ops::matmul(ops::concat_cols(heads), W[li.cross_o]));
      }
    }

    // Position-wise MLP.
    {
      const Var h = ops::layer_norm_rows(x, W[li.ln3_g], W[li.ln3_b]);
      const Var a = ops::gelu(ops::add_row(ops::matmul(h, W[li.ff_w1]), W[li.ff_b1]));
      x = ops::add(x, ops::add_row(ops::matmul(a, W[li.ff_w2]), W[li.ff_b2]));
    }

    if (l + 1 == latent_layer && latent_layer != c.n_layers) {
      if (options.capture_latent) {
        out.latent_probe = tape.parameter(Tensor(steps, static_cast<std::size_t>(c.d_model)));
        x = ops::add(x, out.latent_probe);
      }
      out.latent = ops::slice_rows(x, steps - 1, 1);
    }
  }

  out.hidden = ops::layer_norm_rows(x, W[ix.final_g], W[ix.final_b]);
  if (options.capture_latent && !out.latent_probe.valid()) {
    out.latent_probe = tape.parameter(Tensor(steps, static_cast<std::size_t>(c.d_model)));
    out.hidden = ops::add(out.hidden, out.latent_probe);
  }
  const Var last = ops::slice_rows(out.hidden, steps - 1, 1);
  if (!out.latent.valid()) out.latent = last;
  for (int cb = 0; cb < c.n_codebooks; ++cb) {
    if (options.all_positions_logits) {
      const Var all =
          ops::add_row(ops::matmul(out.hidden, W[ix.head_w[cb]]), W[ix.head_b[cb]]);
      out.all_logits.push_back(all);
      out.logits.push_back(ops::slice_rows(all, steps - 1, 1));
    } else {
      out.logits.push_back(ops::add_row(ops::matmul(last, W[ix.head_w[cb]]), W[ix.head_b[cb]]));
    }
  }
  return out;
}

LatentValues forward_values(const Model& model, const PromptEmbedding& prompt,
                            const AudioSequence& prefix, InjectionMode mode,
                            std::span<const double> mask) {
  Tape tape;
  const BoundModel bound = BoundModel::frozen(model, tape);
  const Var u = tape.constant_ref(prompt.rows);
  ForwardOptions options;
  if (mode != InjectionMode::none) {
    const Var m = tape.constant(Tensor::row_vector(mask));
    options.injection = {mode, m};
  }
  const ForwardResult r = forward_latent(bound, u, prefix, options);
  LatentValues out{r.latent.value(), {}};
  for (const Var& lg : r.logits) out.logits.push_back(lg.value());
  return out;
}

namespace {

int sample_token(std::span<const double> logits, const SamplingConfig& s, RngStream& rng) {
  const std::size_t n = logits.size();
  if (s.temperature <= 0.0) {
    return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  }
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  const std::size_t k =
      s.top_k <= 0 ? n : std::min<std::size_t>(n, static_cast<std::size_t>(s.top_k));
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](int a, int b) {
                      return logits[a] > logits[b] || (logits[a] == logits[b] && a < b);
                    });
  std::vector<double> w(k);
  const double top = logits[order[0]] / s.temperature;
  double total = 0;
  for (std::size_t i = 0; i < k; ++i) {
    w[i] = std::exp(logits[order[i]] / s.temperature - top);
    total += w[i];
  }
  const double u = rng.uniform() * total;
  double acc = 0;
  for (std::size_t i = 0; i < k; ++i) {
    acc += w[i];
    if (u < acc) return order[i];
  }
  return order[k - 1];
}

}  // namespace

Generation generate(const Model& model, const PromptEmbedding& prompt, int length,
                    const SamplingConfig& sampling, const StepMasks& step_masks) {
  if (length < 1) throw ContractError("generation length must be >= 1");
  const ModelConfig& c = model.config();
  const std::size_t L = prompt.length();
  if (step_masks.mode != InjectionMode::none) {
    if (step_masks.masks == nullptr || step_masks.masks->rows() < static_cast<std::size_t>(length) ||
        step_masks.masks->cols() != L) {
      throw ContractError("step masks must be a " + std::to_string(length) + "x" +
                          std::to_string(L) + " matrix");
    }
  }
  RngStream rng(sampling.seed);
  Generation gen;
  gen.audio.codebooks.assign(c.n_codebooks, {});
  for (int step = 0; step < length; ++step) {
    Tape tape;
    const BoundModel bound = BoundModel::frozen(model, tape);
    const Var u = tape.constant_ref(prompt.rows);
    ForwardOptions options;
    if (step_masks.mode != InjectionMode::none) {
      const Var m = tape.constant(Tensor::row_vector(step_masks.masks->row(step)));
      options.injection = {step_masks.mode, m};
    }
    const ForwardResult r = forward_latent(bound, u, gen.audio, options);
    gen.latents.push_back(r.latent.value());
    for (int cb = 0; cb < c.n_codebooks; ++cb) {
      gen.audio.codebooks[cb].push_back(sample_token(r.logits[cb].value().data(), sampling, rng));
    }
  }
  return gen;
}

}  // namespace xattn
