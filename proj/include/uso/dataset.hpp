#pragma once

// On-disk triplet dataset.
//
//   <root>/manifest.jsonl   one JSON record per line (see record_json)
//   <root>/img/<id>_{style,content,target}.f32
//                           raw little-endian float32, C×H×W order
//                           (channel-major, then row, then column), no header.

#include "uso/config.hpp"
#include "uso/synthworld.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

namespace uso::synth {

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void write_raw_image(const std::filesystem::path& path, const Image& img) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DatasetError("cannot write " + path.string());
  for (int c = 0; c < 3; ++c) {
    for (int p = 0; p < kPixels; ++p) {
      const float v = static_cast<float>(img(p, c));
      out.write(reinterpret_cast<const char*>(&v), sizeof(v));
    }
  }
}

inline Image read_raw_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot read " + path.string());
  Image img(kPixels, 3);
  for (int c = 0; c < 3; ++c) {
    for (int p = 0; p < kPixels; ++p) {
      float v = 0.0F;
      in.read(reinterpret_cast<char*>(&v), sizeof(v));
      img(p, c) = v;
    }
  }
  if (!in) throw DatasetError("truncated image " + path.string());
  return img;
}

inline nlohmann::json to_json(const ContentSpec& c) {
  return {{"shape_id", c.shape_id}, {"row", c.row}, {"col", c.col}, {"scale", c.scale == Scale::small ? "small" : "large"}};
}
inline ContentSpec content_from_json(const nlohmann::json& j) {
  return ContentSpec{j.at("shape_id").get<int>(), j.at("row").get<int>(), j.at("col").get<int>(),
                     j.at("scale").get<std::string>() == "small" ? Scale::small : Scale::large};
}
inline nlohmann::json to_json(const StyleSpec& s) {
  return {{"palette_id", s.palette_id},
          {"texture", std::string(kTextureNames[static_cast<std::size_t>(s.texture)])},
          {"texture_phase", s.texture_phase}};
}
inline StyleSpec style_from_json(const nlohmann::json& j) {
  StyleSpec s;
  s.palette_id = j.at("palette_id").get<int>();
  const auto name = j.at("texture").get<std::string>();
  bool found = false;
  for (std::size_t i = 0; i < kTextureNames.size(); ++i) {
    if (kTextureNames[i] == name) {
      s.texture = static_cast<Texture>(i);
      found = true;
    }
  }
  if (!found) throw DatasetError("unknown texture " + name);
  s.texture_phase = j.at("texture_phase").get<double>();
  return s;
}
inline nlohmann::json to_json(const PromptSpec& p) {
  nlohmann::json j{{"shape_word", p.shape_word}, {"position_word", p.position_word}, {"mode", static_cast<int>(p.mode)}};
  j["style_word"] = p.style_word ? nlohmann::json(*p.style_word) : nlohmann::json(nullptr);
  return j;
}
inline PromptSpec prompt_from_json(const nlohmann::json& j) {
  PromptSpec p;
  p.shape_word = j.at("shape_word").get<int>();
  p.position_word = j.at("position_word").get<int>();
  if (!j.at("style_word").is_null()) p.style_word = j.at("style_word").get<int>();
  p.mode = static_cast<PromptMode>(j.at("mode").get<int>());
  return p;
}

struct DatasetConfig {
  int preserved = 100;
  int shifted = 100;
  std::uint64_t seed = 0;
  double tau_style = kDefaultStyleThreshold;
  int num_palettes = kNumPalettes - 1;  // stylized palettes 1..num_palettes
  bool unique = false;                  // forbid repeated (content, style class, mode)

  static DatasetConfig from(const KeyValueConfig& kv) {
    kv.require_known({"preserved", "shifted", "seed", "tau_style", "num_palettes", "unique"});
    DatasetConfig c;
    c.preserved = static_cast<int>(kv.get_int("preserved", c.preserved));
    c.shifted = static_cast<int>(kv.get_int("shifted", c.shifted));
    c.seed = static_cast<std::uint64_t>(kv.get_int("seed", 0));
    c.tau_style = kv.get_double("tau_style", c.tau_style);
    c.num_palettes = static_cast<int>(kv.get_int("num_palettes", c.num_palettes));
    c.unique = kv.get_bool("unique", c.unique);
    return c;
  }
};

struct DatasetRecord {
  Triplet triplet;
  FilterResult filter;
  std::string id;
};

inline nlohmann::json record_json(const DatasetRecord& r) {
  const Triplet& t = r.triplet;
  nlohmann::json j;
  j["id"] = r.id;
  j["files"] = {{"style_ref", "img/" + r.id + "_style.f32"},
                {"content_ref", "img/" + r.id + "_content.f32"},
                {"target", "img/" + r.id + "_target.f32"}};
  j["content"] = to_json(t.content);
  j["style"] = to_json(t.style);
  j["content_ref_spec"] = to_json(t.content_ref_spec);
  j["style_ref_spec"] = to_json(t.style_ref_spec);
  j["layout_mode"] = std::string(to_string(t.layout_mode));
  j["prompt"] = to_json(t.prompt);
  j["filter"] = {{"style_score", r.filter.style_score}, {"content_agrees", r.filter.content_agrees}};
  j["seed"] = t.seed;
  return j;
}

/// Generates curated records in memory. Every record passes filter_triplet.
inline std::vector<DatasetRecord> generate_records(const DatasetConfig& cfg) {
  if (cfg.preserved < 0 || cfg.shifted < 0) throw DatasetError("record counts must be non-negative");
  if (cfg.num_palettes < 1 || cfg.num_palettes > kNumPalettes - 1) {
    throw DatasetError("num_palettes must be in [1, " + std::to_string(kNumPalettes - 1) + "]");
  }
  if (cfg.unique) {
    const long long available = static_cast<long long>(kNumShapes) * kGrid * kGrid * 2 * cfg.num_palettes * kNumTextures;
    if (cfg.preserved > available || cfg.shifted > available) {
      throw DatasetError("unsatisfiable config: " + std::to_string(available) +
                         " unique (content, style) combinations per layout mode");
    }
  }
  Rng rng(Rng::mix(cfg.seed, 0xDA7A));
  std::vector<DatasetRecord> out;
  out.reserve(static_cast<std::size_t>(cfg.preserved + cfg.shifted));
  for (LayoutMode mode : {LayoutMode::preserved, LayoutMode::shifted}) {
    const int count = mode == LayoutMode::preserved ? cfg.preserved : cfg.shifted;
    std::set<std::tuple<int, int, int, int, int>> used;
    for (int i = 0; i < count; ++i) {
      bool done = false;
      for (int attempt = 0; attempt < 1000 && !done; ++attempt) {
        const ContentSpec c = random_content(rng);
        const StyleSpec s = random_style(rng, cfg.num_palettes);
        const auto key = std::make_tuple(c.shape_id, c.cell(), static_cast<int>(c.scale), s.palette_id,
                                         static_cast<int>(s.texture));
        if (cfg.unique && used.count(key)) continue;
        const std::uint64_t rec_seed = rng.next_u64();
        DatasetRecord rec;
        rec.triplet = make_triplet(c, s, mode, rec_seed);
        rec.filter = filter_triplet(rec.triplet, cfg.tau_style);
        if (!rec.filter.accepted()) continue;
        std::ostringstream id;
        id << (mode == LayoutMode::preserved ? "p" : "s") << std::setw(6) << std::setfill('0') << i;
        rec.id = id.str();
        used.insert(key);
        out.push_back(std::move(rec));
        done = true;
      }
      if (!done) throw DatasetError("could not curate record " + std::to_string(i) + " within the attempt budget");
    }
  }
  return out;
}

/// Writes images and manifest under `root`; returns the manifest path.
inline std::filesystem::path build_dataset(const DatasetConfig& cfg, const std::filesystem::path& root) {
  const auto records = generate_records(cfg);
  std::filesystem::create_directories(root / "img");
  const auto manifest = root / "manifest.jsonl";
  std::ofstream out(manifest, std::ios::trunc);
  if (!out) throw DatasetError("cannot write manifest under " + root.string());
  for (const auto& r : records) {
    write_raw_image(root / ("img/" + r.id + "_style.f32"), r.triplet.style_ref);
    write_raw_image(root / ("img/" + r.id + "_content.f32"), r.triplet.content_ref);
    write_raw_image(root / ("img/" + r.id + "_target.f32"), r.triplet.target);
    out << record_json(r).dump() << "\n";
  }
  return manifest;
}

inline std::vector<Triplet> load_dataset(const std::filesystem::path& root) {
  std::ifstream in(root / "manifest.jsonl");
  if (!in) throw DatasetError("no manifest under " + root.string());
  std::vector<Triplet> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    Triplet t;
    t.style_ref = read_raw_image(root / j.at("files").at("style_ref").get<std::string>());
    t.content_ref = read_raw_image(root / j.at("files").at("content_ref").get<std::string>());
    t.target = read_raw_image(root / j.at("files").at("target").get<std::string>());
    t.content = content_from_json(j.at("content"));
    t.style = style_from_json(j.at("style"));
    t.content_ref_spec = content_from_json(j.at("content_ref_spec"));
    t.style_ref_spec = content_from_json(j.at("style_ref_spec"));
    t.layout_mode = j.at("layout_mode").get<std::string>() == "preserved" ? LayoutMode::preserved : LayoutMode::shifted;
    t.prompt = prompt_from_json(j.at("prompt"));
    t.seed = j.at("seed").get<std::uint64_t>();
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace uso::synth
