#pragma once

// Line-delimited dataset index over GTF1 containers. Schema is in
// docs/format.md. Every cross-reference is checked when the index is
// loaded; tensors are only read when a sample is requested.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mlground/common_space.hpp"
#include "mlground/container.hpp"
#include "mlground/error.hpp"

namespace mlground {

class DatasetError : public Error {
 public:
  using Error::Error;
};

// Half-open pixel rectangle [x0, x1) x [y0, y1).
struct Box {
  std::int64_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  bool contains(std::int64_t x, std::int64_t y) const {
    return x >= x0 && x < x1 && y >= y0 && y < y1;
  }
  bool operator==(const Box&) const = default;
};

struct Query {
  std::vector<std::size_t> tokens;  // indices into the caption
  std::vector<Box> boxes;           // a hit on any box counts
  std::string category;
  std::optional<std::size_t> planted_level;  // known only for synthetic data
};

struct SampleRecord {
  std::string id;
  std::string image_id;
  std::filesystem::path container;
  std::size_t image_width = 0, image_height = 0;
  std::vector<std::string> levels;  // one h x w x c tensor per level
  std::vector<std::string> tokens;
  std::vector<std::string> words;   // one K x E tensor per token
  std::string sentence;             // K_s x S
  std::vector<Query> queries;
};

struct DatasetDims {
  std::vector<std::size_t> visual_channels;
  std::size_t word_layers = 0, word_width = 0;
  std::size_t sentence_items = 0, sentence_width = 0;

  MappingDims mapping(std::size_t common_dim) const {
    MappingDims d;
    d.visual_channels = visual_channels;
    d.word_layers = word_layers;
    d.word_width = word_width;
    d.sentence_items = sentence_items;
    d.sentence_width = sentence_width;
    d.common_dim = common_dim;
    return d;
  }
};

namespace detail {

inline nlohmann::json box_to_json(const Box& b) { return {b.x0, b.y0, b.x1, b.y1}; }

}  // namespace detail

inline nlohmann::json record_to_json(const SampleRecord& r, const std::filesystem::path& root) {
  nlohmann::json q = nlohmann::json::array();
  for (const auto& query : r.queries) {
    nlohmann::json boxes = nlohmann::json::array();
    for (const auto& b : query.boxes) boxes.push_back(detail::box_to_json(b));
    nlohmann::json j = {{"tokens", query.tokens}, {"boxes", boxes}, {"category", query.category}};
    if (query.planted_level) j["level"] = *query.planted_level;
    q.push_back(std::move(j));
  }
  auto container = r.container.is_absolute() ? r.container.lexically_relative(root) : r.container;
  return {{"id", r.id},
          {"container", container.generic_string()},
          {"image",
           {{"id", r.image_id},
            {"width", r.image_width},
            {"height", r.image_height},
            {"levels", r.levels}}},
          {"caption", {{"tokens", r.tokens}, {"words", r.words}, {"sentence", r.sentence}}},
          {"queries", q}};
}

// Writes the index through a `.partial` file.
inline void write_index(const std::filesystem::path& path, const std::vector<SampleRecord>& records) {
  auto tmp = path;
  tmp += ".partial";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw IoError(detail::concat("cannot write '", tmp.string(), "'"));
    for (const auto& r : records) out << record_to_json(r, path.parent_path()).dump() << '\n';
    if (!out) throw IoError(detail::concat("cannot write '", tmp.string(), "'"));
  }
  std::filesystem::rename(tmp, path);
}

template <typename Scalar>
struct Sample {
  RawVisualFeatures<Scalar> visual;
  RawTextFeatures<Scalar> text;
};

class Dataset {
 public:
  static Dataset load(const std::filesystem::path& index_path) {
    std::ifstream in(index_path);
    if (!in) throw DatasetError(detail::concat("cannot open index '", index_path.string(), "'"));
    Dataset ds;
    ds.root_ = index_path.parent_path();
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      try {
        ds.records_.push_back(parse_record(nlohmann::json::parse(line), ds.root_));
      } catch (const nlohmann::json::exception& e) {
        throw DatasetError(detail::concat(index_path.string(), ":", lineno, ": ", e.what()));
      } catch (const DatasetError& e) {
        throw DatasetError(detail::concat(index_path.string(), ":", lineno, ": ", e.what()));
      }
    }
    if (ds.records_.empty()) {
      throw DatasetError(detail::concat("index '", index_path.string(), "' has no samples"));
    }
    ds.validate();
    return ds;
  }

  std::size_t size() const { return records_.size(); }
  const SampleRecord& record(std::size_t i) const { return records_.at(i); }
  const std::vector<SampleRecord>& records() const { return records_; }
  const DatasetDims& dims() const { return dims_; }
  const std::filesystem::path& root() const { return root_; }

  std::size_t find(const std::string& id) const {
    for (std::size_t i = 0; i < records_.size(); ++i) {
      if (records_[i].id == id) return i;
    }
    throw DatasetError(detail::concat("no sample with id '", id, "'"));
  }

  std::size_t image_count() const {
    std::set<std::string> ids;
    for (const auto& r : records_) ids.insert(r.image_id);
    return ids.size();
  }

  template <typename Scalar>
  RawVisualFeatures<Scalar> visual(std::size_t i) const {
    const auto& r = record(i);
    const auto& reader = this->reader(r.container);
    RawVisualFeatures<Scalar> out;
    for (const auto& name : r.levels) out.levels.push_back(reader.read_as<Scalar>(name));
    return out;
  }

  template <typename Scalar>
  RawTextFeatures<Scalar> text(std::size_t i) const {
    const auto& r = record(i);
    const auto& reader = this->reader(r.container);
    const std::size_t k = dims_.word_layers, e = dims_.word_width;
    RawTextFeatures<Scalar> out;
    out.words = Tensor<Scalar>({r.words.size(), k, e});
    for (std::size_t t = 0; t < r.words.size(); ++t) {
      auto w = reader.read_as<Scalar>(r.words[t]);
      std::copy(w.data().begin(), w.data().end(), out.words.storage().begin() + t * k * e);
    }
    out.sentence = reader.read_as<Scalar>(r.sentence);
    return out;
  }

  template <typename Scalar>
  Sample<Scalar> sample(std::size_t i) const {
    return {visual<Scalar>(i), text<Scalar>(i)};
  }

  // Iteration order: identity, or a seeded uniform permutation.
  std::vector<std::size_t> order(bool shuffle, std::uint64_t seed = 0) const {
    std::vector<std::size_t> idx(records_.size());
    std::iota(idx.begin(), idx.end(), 0);
    if (shuffle) {
      std::mt19937_64 rng(seed);
      std::shuffle(idx.begin(), idx.end(), rng);
    }
    return idx;
  }

 private:
  static std::vector<std::string> strings(const nlohmann::json& j, const char* key) {
    std::vector<std::string> out;
    for (const auto& v : j.at(key)) out.push_back(v.get<std::string>());
    return out;
  }

  static SampleRecord parse_record(const nlohmann::json& j, const std::filesystem::path& root) {
    SampleRecord r;
    r.id = j.at("id").get<std::string>();
    std::filesystem::path c = j.at("container").get<std::string>();
    r.container = c.is_absolute() ? c : root / c;
    const auto& image = j.at("image");
    r.image_id = image.at("id").get<std::string>();
    r.image_width = image.at("width").get<std::size_t>();
    r.image_height = image.at("height").get<std::size_t>();
    r.levels = strings(image, "levels");
    const auto& caption = j.at("caption");
    r.tokens = strings(caption, "tokens");
    r.words = strings(caption, "words");
    r.sentence = caption.at("sentence").get<std::string>();
    if (j.contains("queries")) {
      for (const auto& q : j.at("queries")) {
        Query query;
        query.tokens = q.at("tokens").get<std::vector<std::size_t>>();
        for (const auto& b : q.at("boxes")) {
          auto v = b.get<std::vector<std::int64_t>>();
          if (v.size() != 4) throw DatasetError(detail::concat("sample '", r.id, "': box needs 4 numbers"));
          query.boxes.push_back({v[0], v[1], v[2], v[3]});
        }
        if (q.contains("category")) query.category = q.at("category").get<std::string>();
        if (q.contains("level") && !q.at("level").is_null()) {
          query.planted_level = q.at("level").get<std::size_t>();
        }
        r.queries.push_back(std::move(query));
      }
    }
    return r;
  }

  const ContainerReader& reader(const std::filesystem::path& p) const {
    auto it = readers_.find(p.string());
    if (it == readers_.end()) {
      it = readers_.emplace(p.string(), std::make_shared<ContainerReader>(p)).first;
    }
    return *it->second;
  }

  // Checks one referenced tensor and returns its shape.
  const Shape& expect(const SampleRecord& r, const std::string& name, std::size_t rank) const {
    const auto& rd = reader(r.container);
    if (!rd.contains(name)) {
      throw DatasetError(detail::concat("sample '", r.id, "': tensor '", name, "' not found in '",
                                        r.container.string(), "'"));
    }
    const auto& shape = rd.entry(name).shape;
    if (shape.size() != rank) {
      throw DatasetError(detail::concat("sample '", r.id, "': tensor '", name, "' has shape ",
                                        detail::shape_str(shape), ", expected rank ", rank));
    }
    return shape;
  }

  void agree(std::size_t& slot, std::size_t got, const SampleRecord& r, const std::string& name,
             const char* what) {
    if (slot == 0) slot = got;
    if (slot != got) {
      throw DatasetError(detail::concat("sample '", r.id, "': tensor '", name, "' has ", what, " ",
                                        got, ", other samples have ", slot));
    }
  }

  void validate() {
    std::set<std::string> ids;
    std::map<std::string, const SampleRecord*> images;
    for (const auto& r : records_) {
      if (!ids.insert(r.id).second) throw DatasetError(detail::concat("duplicate sample id '", r.id, "'"));
      if (!std::filesystem::exists(r.container)) {
        throw DatasetError(detail::concat("sample '", r.id, "': container '", r.container.string(),
                                          "' does not exist"));
      }
      try {
        reader(r.container);
      } catch (const ContainerError& e) {
        throw DatasetError(detail::concat("sample '", r.id, "': ", e.what()));
      }
      if (r.levels.empty()) throw DatasetError(detail::concat("sample '", r.id, "': no visual levels"));
      if (r.tokens.empty()) throw DatasetError(detail::concat("sample '", r.id, "': empty caption"));
      if (r.words.size() != r.tokens.size()) {
        throw DatasetError(detail::concat("sample '", r.id, "': ", r.tokens.size(), " tokens but ",
                                          r.words.size(), " word tensors"));
      }
      if (r.image_width == 0 || r.image_height == 0) {
        throw DatasetError(detail::concat("sample '", r.id, "': image size must be positive"));
      }
      if (dims_.visual_channels.empty()) dims_.visual_channels.assign(r.levels.size(), 0);
      if (r.levels.size() != dims_.visual_channels.size()) {
        throw DatasetError(detail::concat("sample '", r.id, "': ", r.levels.size(),
                                          " levels, other samples have ", dims_.visual_channels.size()));
      }
      for (std::size_t l = 0; l < r.levels.size(); ++l) {
        agree(dims_.visual_channels[l], expect(r, r.levels[l], 3)[2], r, r.levels[l], "channels");
      }
      for (const auto& w : r.words) {
        const auto& s = expect(r, w, 2);
        agree(dims_.word_layers, s[0], r, w, "layers");
        agree(dims_.word_width, s[1], r, w, "width");
      }
      const auto& s = expect(r, r.sentence, 2);
      agree(dims_.sentence_items, s[0], r, r.sentence, "items");
      agree(dims_.sentence_width, s[1], r, r.sentence, "width");
      for (const auto& q : r.queries) validate_query(r, q);
      auto [it, fresh] = images.emplace(r.image_id, &r);
      if (!fresh && (it->second->container != r.container || it->second->levels != r.levels)) {
        throw DatasetError(detail::concat("sample '", r.id, "': image '", r.image_id,
                                          "' references different visual tensors than sample '",
                                          it->second->id, "'"));
      }
    }
  }

  static void validate_query(const SampleRecord& r, const Query& q) {
    if (q.tokens.empty()) throw DatasetError(detail::concat("sample '", r.id, "': query without tokens"));
    for (auto t : q.tokens) {
      if (t >= r.tokens.size()) {
        throw DatasetError(detail::concat("sample '", r.id, "': query token ", t, " out of range"));
      }
    }
    if (q.boxes.empty()) throw DatasetError(detail::concat("sample '", r.id, "': query without boxes"));
    for (const auto& b : q.boxes) {
      const bool ok = b.x0 >= 0 && b.y0 >= 0 && b.x0 < b.x1 && b.y0 < b.y1 &&
                      b.x1 <= std::int64_t(r.image_width) && b.y1 <= std::int64_t(r.image_height);
      if (!ok) {
        throw DatasetError(detail::concat("sample '", r.id, "': box [", b.x0, ",", b.y0, ",", b.x1,
                                          ",", b.y1, ") invalid for ", r.image_width, "x",
                                          r.image_height, " image"));
      }
    }
  }

  std::filesystem::path root_;
  std::vector<SampleRecord> records_;
  DatasetDims dims_;
  mutable std::map<std::string, std::shared_ptr<ContainerReader>> readers_;
};

// One epoch of batches. Samples are visited in a uniformly shuffled order;
// a sample whose image is already in the open batch waits for the next one,
// so each caption has exactly one relevant image in its batch. The trailing
// incomplete batch is dropped.
inline std::vector<std::vector<std::size_t>> epoch_batches(const Dataset& ds, std::size_t batch,
                                                           std::mt19937_64& rng) {
  if (batch == 0) throw ValueError("batch size must be positive");
  if (ds.image_count() < batch) {
    throw DatasetError(detail::concat("dataset has ", ds.image_count(), " distinct images, fewer than batch size ",
                                      batch));
  }
  std::vector<std::size_t> perm(ds.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);

  std::vector<std::vector<std::size_t>> out;
  std::vector<std::size_t> open, waiting;
  std::set<std::string> in_batch;
  auto try_add = [&](std::size_t i) {
    if (!in_batch.insert(ds.record(i).image_id).second) return false;
    open.push_back(i);
    if (open.size() == batch) {
      out.push_back(std::move(open));
      open.clear();
      in_batch.clear();
    }
    return true;
  };
  for (auto i : perm) {
    if (!try_add(i)) {
      waiting.push_back(i);
      continue;
    }
    if (open.empty()) {
      std::vector<std::size_t> retry;
      retry.swap(waiting);
      for (auto w : retry) {
        if (!try_add(w)) waiting.push_back(w);
      }
    }
  }
  return out;
}

}  // namespace mlground
