#include "xattn/io.hpp"

#include <fstream>
#include <sstream>

#include "xattn/errors.hpp"

namespace xattn {

Json to_json(const ModelConfig& c) {
  return Json{{"text_vocab", c.text_vocab},   {"audio_vocab", c.audio_vocab},
              {"d_text", c.d_text},           {"d_model", c.d_model},
              {"n_layers", c.n_layers},       {"n_heads", c.n_heads},
              {"d_head", c.d_head},           {"d_ff", c.d_ff},
              {"n_codebooks", c.n_codebooks}, {"max_seq_len", c.max_seq_len},
              {"max_prompt_len", c.max_prompt_len}, {"latent_layer", c.latent_layer}};
}

ModelConfig model_config_from_json(const Json& j) {
  ModelConfig c;
  c.text_vocab = j.value("text_vocab", c.text_vocab);
  c.audio_vocab = j.value("audio_vocab", c.audio_vocab);
  c.d_text = j.value("d_text", c.d_text);
  c.d_model = j.value("d_model", c.d_model);
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.d_head = j.value("d_head", c.d_head);
  c.d_ff = j.value("d_ff", c.d_ff);
  c.n_codebooks = j.value("n_codebooks", c.n_codebooks);
  c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
  c.max_prompt_len = j.value("max_prompt_len", c.max_prompt_len);
  c.latent_layer = j.value("latent_layer", c.latent_layer);
  return c;
}

Json to_json(const Model& model) {
  Json params = Json::array();
  const auto& names = model.parameter_names();
  for (std::size_t i = 0; i < names.size(); ++i) {
    const Tensor& t = model.parameters()[i];
    params.push_back({{"name", names[i]},
                      {"rows", t.rows()},
                      {"cols", t.cols()},
                      {"data", std::vector<double>(t.data().begin(), t.data().end())}});
  }
  return Json{{"format", "xattn-model"},
              {"version", 1},
              {"config", to_json(model.config())},
              {"checksum", model.checksum()},
              {"params", std::move(params)}};
}

Model model_from_json(const Json& j) {
  if (j.value("format", "") != "xattn-model") throw ContractError("not an xattn model checkpoint");
  if (j.value("version", 0) != 1) throw ContractError("unsupported checkpoint version");
  const ModelConfig config = model_config_from_json(j.at("config"));
  std::vector<std::string> names;
  std::vector<Tensor> params;
  for (const Json& p : j.at("params")) {
    names.push_back(p.at("name").get<std::string>());
    params.emplace_back(p.at("rows").get<std::size_t>(), p.at("cols").get<std::size_t>(),
                        p.at("data").get<std::vector<double>>());
  }
  Model m = Model::from_parameters(config, std::move(names), std::move(params));
  if (j.contains("checksum") && j.at("checksum").get<std::string>() != m.checksum()) {
    throw ContractError("checkpoint checksum mismatch");
  }
  return m;
}

Json to_json(const ToyTaskSpec& s) {
  return Json{{"n_concepts", s.n_concepts},       {"n_fillers", s.n_fillers},
              {"prompt_length", s.prompt_length}, {"audio_length", s.audio_length},
              {"segment_length", s.segment_length}, {"range_width", s.range_width},
              {"audio_vocab", s.audio_vocab},
              {"max_concepts_per_prompt", s.max_concepts_per_prompt}};
}

ToyTaskSpec toy_spec_from_json(const Json& j) {
  ToyTaskSpec s;
  s.n_concepts = j.value("n_concepts", s.n_concepts);
  s.n_fillers = j.value("n_fillers", s.n_fillers);
  s.prompt_length = j.value("prompt_length", s.prompt_length);
  s.audio_length = j.value("audio_length", s.audio_length);
  s.segment_length = j.value("segment_length", s.segment_length);
  s.range_width = j.value("range_width", s.range_width);
  s.audio_vocab = j.value("audio_vocab", s.audio_vocab);
  s.max_concepts_per_prompt = j.value("max_concepts_per_prompt", s.max_concepts_per_prompt);
  return s;
}

Json to_json(const ToyDataset& ds) {
  Json ex = Json::array();
  for (const ToyExample& e : ds.examples) {
    ex.push_back({{"prompt", e.prompt}, {"target", e.target.codebooks}, {"concepts", e.concepts}});
  }
  return Json{{"format", "xattn-toy-dataset"}, {"spec", to_json(ds.spec)}, {"examples", ex}};
}

ToyDataset dataset_from_json(const Json& j) {
  ToyDataset ds;
  ds.spec = toy_spec_from_json(j.at("spec"));
  for (const Json& e : j.at("examples")) {
    ToyExample ex;
    ex.prompt = e.at("prompt").get<std::vector<int>>();
    ex.target.codebooks = e.at("target").get<std::vector<std::vector<int>>>();
    ex.concepts = e.at("concepts").get<std::vector<int>>();
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

Json to_json(const Tensor& t) {
  Json rows = Json::array();
  for (std::size_t r = 0; r < t.rows(); ++r) {
    rows.push_back(std::vector<double>(t.row(r).begin(), t.row(r).end()));
  }
  return rows;
}

Tensor tensor_from_json(const Json& j) {
  const auto rows = j.get<std::vector<std::vector<double>>>();
  if (rows.empty() || rows[0].empty()) throw DimensionError("empty tensor in JSON");
  Tensor t(rows.size(), rows[0].size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != t.cols()) throw DimensionError("ragged tensor in JSON");
    for (std::size_t c = 0; c < t.cols(); ++c) t(r, c) = rows[r][c];
  }
  return t;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ContractError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Json read_json(const std::filesystem::path& path) {
  try {
    return Json::parse(read_text(path));
  } catch (const Json::parse_error& e) {
    throw ContractError("invalid JSON in " + path.string() + ": " + e.what());
  }
}

void write_text_once(const std::filesystem::path& path, const std::string& text) {
  if (std::filesystem::exists(path)) {
    throw ContractError("refusing to overwrite existing artifact " + path.string());
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ContractError("cannot write " + path.string());
  out << text;
}

void write_json_once(const std::filesystem::path& path, const Json& j) {
  write_text_once(path, j.dump(1) + "\n");
}

void save_model(const std::filesystem::path& path, const Model& model) {
  write_text_once(path, to_json(model).dump() + "\n");
}

Model load_model(const std::filesystem::path& path) { return model_from_json(read_json(path)); }

}  // namespace xattn
