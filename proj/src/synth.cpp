#include "shrike/synth.hpp"

#include <algorithm>
#include <bit>
#include <filesystem>
#include <fstream>
#include <future>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "shrike/error.hpp"

namespace shrike::synth {

namespace fs = std::filesystem;
using nlohmann::json;
using scenegraph::kSegmentsPerVideo;

const std::vector<std::string>& answer_vocab() {
  static const std::vector<std::string> vocab = [] {
    std::vector<std::string> v;
    for (int i = 0; i < kInstrumentCount; ++i)
      v.emplace_back(scenegraph::object_names()[static_cast<std::size_t>(i)]);
    for (const char* w : {"yes", "no", "zero", "one", "two", "three", "left", "middle", "right"})
      v.emplace_back(w);
    return v;
  }();
  return vocab;
}

int answer_index(std::string_view word) {
  const auto& vocab = answer_vocab();
  for (std::size_t i = 0; i < vocab.size(); ++i)
    if (vocab[i] == word) return static_cast<int>(i);
  throw VocabularyError("unknown answer word: '" + std::string(word) + "'");
}

std::string_view template_name(Template t) {
  switch (t) {
    case Template::existential: return "existential";
    case Template::counting: return "counting";
    case Template::localization: return "localization";
    case Template::comparative: return "comparative";
    case Template::temporal: return "temporal";
  }
  throw InvalidInputError("bad template");
}

Template template_from_name(std::string_view name) {
  for (int i = 0; i < kTemplateCount; ++i)
    if (template_name(static_cast<Template>(i)) == name) return static_cast<Template>(i);
  throw VocabularyError("unknown template: '" + std::string(name) + "'");
}

int WorldState::playing_count(int t) const {
  int n = 0;
  for (const Entity& e : entities)
    if (e.playing_at(t)) ++n;
  return n;
}

void WorldState::validate() const {
  if (entities.size() < 2 || entities.size() > 3)
    throw InvalidInputError("WorldState: expected 2 or 3 instruments");
  std::set<int> instruments, sides, loudness;
  for (const Entity& e : entities) {
    if (e.instrument < 0 || e.instrument >= kInstrumentCount)
      throw InvalidInputError("WorldState: instrument out of range");
    if (e.side < 0 || e.side > 2) throw InvalidInputError("WorldState: side out of range");
    if (e.loudness < 1 || e.loudness > 5) throw InvalidInputError("WorldState: loudness out of range");
    if (e.t_on < 0 || e.t_off > segments || e.t_on >= e.t_off)
      throw InvalidInputError("WorldState: empty or out-of-range interval");
    instruments.insert(e.instrument);
    sides.insert(e.side);
    loudness.insert(e.loudness);
  }
  if (instruments.size() != entities.size() || sides.size() != entities.size() ||
      loudness.size() != entities.size())
    throw InvalidInputError("WorldState: instruments, sides and loudness must be pairwise distinct");
}

WorldState gen_world(Rng& rng, int segments) {
  WorldState w;
  w.segments = segments;
  const int count = rng.uniform_int(2, 3);

  std::vector<int> instruments(kInstrumentCount);
  std::iota(instruments.begin(), instruments.end(), 0);
  std::vector<int> sides = {0, 1, 2};
  std::vector<int> loudness = {1, 2, 3, 4, 5};
  auto draw = [&](std::vector<int>& pool) {
    const int i = rng.uniform_int(0, static_cast<int>(pool.size()) - 1);
    const int v = pool[static_cast<std::size_t>(i)];
    pool.erase(pool.begin() + i);
    return v;
  };

  for (int i = 0; i < count; ++i) {
    Entity e;
    e.instrument = draw(instruments);
    e.side = draw(sides);
    e.loudness = draw(loudness);
    e.t_on = rng.uniform_int(0, segments - 2);
    e.t_off = rng.uniform_int(e.t_on + 1, segments);
    w.entities.push_back(e);
  }
  w.validate();
  return w;
}

namespace {

int side_predicate(int side) {
  switch (side) {
    case 0: return scenegraph::predicate_index("left");
    case 1: return scenegraph::predicate_index("middle");
    case 2: return scenegraph::predicate_index("right");
  }
  throw InvalidInputError("bad side");
}

std::string_view side_word(int side) {
  switch (side) {
    case 0: return "left";
    case 1: return "middle";
    case 2: return "right";
  }
  throw InvalidInputError("bad side");
}

}  // namespace

scenegraph::VideoAnnotation world_to_graphs(const WorldState& world, const std::string& video_id) {
  world.validate();
  if (world.segments != kSegmentsPerVideo)
    throw InvalidInputError("world_to_graphs: annotations are defined for 10-segment videos");
  scenegraph::VideoAnnotation va;
  va.video_id = video_id;
  const auto person = scenegraph::ObjectLabel::of("person");
  const auto scene = scenegraph::ObjectLabel::of("scene");
  for (int t = 0; t < world.segments; ++t) {
    scenegraph::SegmentGraph g;
    g.segment_index = t;
    for (const Entity& e : world.entities) {
      scenegraph::Triplet trip;
      trip.subject = person;
      trip.predicate = scenegraph::predicate_index(e.playing_at(t) ? "play" : "hold");
      trip.object.category = e.instrument;
      g.triplets.push_back(trip);
    }
    for (const Entity& e : world.entities) {
      scenegraph::Triplet trip;
      trip.subject.category = e.instrument;
      trip.predicate = side_predicate(e.side);
      trip.object = scene;
      g.triplets.push_back(trip);
    }
    for (const Entity& a : world.entities) {
      for (const Entity& b : world.entities) {
        if (&a == &b || !a.playing_at(t) || !b.playing_at(t) || a.loudness <= b.loudness) continue;
        scenegraph::Triplet trip;
        trip.subject.category = a.instrument;
        trip.predicate = scenegraph::predicate_index("louder");
        trip.object.category = b.instrument;
        g.triplets.push_back(trip);
      }
    }
    g.triplets.resize(scenegraph::kTripletsPerSegment);
    va.graphs.push_back(std::move(g));
  }
  va.validate();
  return va;
}

DatasetEmbedding DatasetEmbedding::init(int dim, int segments, std::uint64_t dataset_seed) {
  DatasetEmbedding e;
  e.dim = dim;
  const double s = 1.0 / std::sqrt(static_cast<double>(dim));
  Rng rng(Rng::mix(dataset_seed, 0xE5B));
  e.visual = Mat::normal(2 * kInstrumentCount + 1, dim, 0.0, s, rng);
  e.audio = Mat::normal(2 * kInstrumentCount, dim, 0.0, s, rng);
  e.patch = Mat::normal(26, dim, 0.0, s, rng);
  e.templates = Mat::normal(kTemplateCount, dim, 0.0, s, rng);
  e.instruments = Mat::normal(kInstrumentCount, dim, 0.0, s, rng);
  e.segment_arg = Mat::normal(segments, dim, 0.0, s, rng);
  return e;
}

Features world_to_features(const WorldState& world, const DatasetEmbedding& embedding,
                           int patch_tokens, Rng& noise_rng, double eta) {
  world.validate();
  if (patch_tokens < 4)
    throw InvalidInputError("world_to_features: at least 4 patch slots are required");
  const int t_len = world.segments;
  const int d = embedding.dim;
  Features f;
  f.f_v = Mat(t_len, d);
  f.f_a = Mat(t_len, d);
  f.f_p = Mat(t_len * patch_tokens, d);

  for (int t = 0; t < t_len; ++t) {
    // Visual: presence + playing + person.
    for (const Entity& e : world.entities) {
      for (int j = 0; j < d; ++j) {
        f.f_v(t, j) += embedding.visual(e.instrument, j);
        if (e.playing_at(t)) f.f_v(t, j) += embedding.visual(kInstrumentCount + e.instrument, j);
      }
    }
    for (int j = 0; j < d; ++j) f.f_v(t, j) += embedding.visual(2 * kInstrumentCount, j);

    // Audio: binary playing flags plus loudness-scaled channels; silent
    // segments carry noise only.
    for (const Entity& e : world.entities) {
      if (!e.playing_at(t)) continue;
      const double level = e.loudness / 5.0;
      for (int j = 0; j < d; ++j) {
        f.f_a(t, j) += embedding.audio(e.instrument, j);
        f.f_a(t, j) += level * embedding.audio(kInstrumentCount + e.instrument, j);
      }
    }

    // Patches: slots 0..2 are the left/middle/right positions, slot 3 holds
    // person and scene codes.
    for (const Entity& e : world.entities) {
      const int row = t * patch_tokens + e.side;
      for (int j = 0; j < d; ++j) {
        f.f_p(row, j) += embedding.patch(e.instrument, j);
        if (e.playing_at(t)) {
          f.f_p(row, j) += embedding.patch(22, j);
          f.f_p(row, j) += (e.loudness / 5.0) * embedding.patch(23, j);
        }
      }
    }
    const int meta_row = t * patch_tokens + 3;
    for (int j = 0; j < d; ++j) f.f_p(meta_row, j) += embedding.patch(24, j) + embedding.patch(25, j);
  }

  for (Mat* m : {&f.f_v, &f.f_a, &f.f_p})
    for (int i = 0; i < m->rows(); ++i)
      for (int j = 0; j < d; ++j) (*m)(i, j) += noise_rng.normal(0.0, eta);
  return f;
}

namespace {

Mat question_embedding(const DatasetEmbedding& e, Template t, const Mat* arg1, const Mat* arg2) {
  Mat q(1, e.dim);
  for (int j = 0; j < e.dim; ++j) {
    double v = e.templates(static_cast<int>(t), j);
    if (arg1) v += (*arg1)(0, j);
    if (arg2) v += (*arg2)(0, j);
    q(0, j) = v / std::sqrt(3.0);
  }
  return q;
}

Mat code_row(const Mat& table, int row) {
  Mat out(1, table.cols());
  for (int j = 0; j < table.cols(); ++j) out(0, j) = table(row, j);
  return out;
}

Mat question_words(const DatasetEmbedding& e, Template t, const Mat* arg1, const Mat* arg2,
                   int question_tokens) {
  if (question_tokens < 3)
    throw InvalidInputError("question_words: at least 3 question tokens are required");
  Mat w(question_tokens, e.dim);
  for (int j = 0; j < e.dim; ++j) {
    w(0, j) = e.templates(static_cast<int>(t), j);
    if (arg1) w(1, j) = (*arg1)(0, j);
    if (arg2) w(2, j) = (*arg2)(0, j);
  }
  return w;
}

std::string_view instrument_name(int instrument) {
  return scenegraph::object_names()[static_cast<std::size_t>(instrument)];
}

}  // namespace

std::optional<QaPart> gen_qa(const WorldState& world, Template t, const DatasetEmbedding& embedding,
                             int question_tokens, Rng& rng, std::optional<int> counting_target) {
  world.validate();
  QaPart qa;
  qa.template_tag = t;
  switch (t) {
    case Template::existential: {
      const bool want_present = rng.uniform() < 0.5;
      int x = -1;
      if (want_present) {
        x = world.entities[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(world.entities.size()) - 1))]
                .instrument;
      } else {
        std::vector<int> absent;
        for (int i = 0; i < kInstrumentCount; ++i) {
          bool present = false;
          for (const Entity& e : world.entities) present |= e.instrument == i;
          if (!present) absent.push_back(i);
        }
        x = absent[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(absent.size()) - 1))];
      }
      qa.question = "is " + std::string(instrument_name(x)) + " present";
      qa.answer_index = answer_index(want_present ? "yes" : "no");
      const Mat arg = code_row(embedding.instruments, x);
      qa.q_s = question_embedding(embedding, t, &arg, nullptr);
      qa.q_w = question_words(embedding, t, &arg, nullptr, question_tokens);
      return qa;
    }
    case Template::counting: {
      const int target = counting_target ? *counting_target : rng.uniform_int(0, 3);
      std::vector<int> matching;
      for (int seg = 0; seg < world.segments; ++seg)
        if (world.playing_count(seg) == target) matching.push_back(seg);
      if (matching.empty()) return std::nullopt;
      const int seg = matching[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(matching.size()) - 1))];
      qa.question = "how many instruments are playing at segment " + std::to_string(seg);
      const char* words[] = {"zero", "one", "two", "three"};
      qa.answer_index = answer_index(words[target]);
      const Mat arg = code_row(embedding.segment_arg, seg);
      qa.q_s = question_embedding(embedding, t, &arg, nullptr);
      qa.q_w = question_words(embedding, t, &arg, nullptr, question_tokens);
      return qa;
    }
    case Template::localization: {
      const Entity& e = world.entities[static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<int>(world.entities.size()) - 1))];
      qa.question = "where is " + std::string(instrument_name(e.instrument));
      qa.answer_index = answer_index(side_word(e.side));
      const Mat arg = code_row(embedding.instruments, e.instrument);
      qa.q_s = question_embedding(embedding, t, &arg, nullptr);
      qa.q_w = question_words(embedding, t, &arg, nullptr, question_tokens);
      return qa;
    }
    case Template::comparative: {
      std::vector<std::pair<int, int>> overlapping;  // indices into entities, louder first
      for (std::size_t i = 0; i < world.entities.size(); ++i) {
        for (std::size_t j = 0; j < world.entities.size(); ++j) {
          if (i == j) continue;
          const Entity& a = world.entities[i];
          const Entity& b = world.entities[j];
          const bool overlap = std::max(a.t_on, b.t_on) < std::min(a.t_off, b.t_off);
          if (overlap && a.loudness > b.loudness)
            overlapping.emplace_back(static_cast<int>(i), static_cast<int>(j));
        }
      }
      if (overlapping.empty()) return std::nullopt;
      const auto [hi, lo] = overlapping[static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<int>(overlapping.size()) - 1))];
      const bool ask_louder_first = rng.uniform() < 0.5;
      const Entity& x = world.entities[static_cast<std::size_t>(ask_louder_first ? hi : lo)];
      const Entity& y = world.entities[static_cast<std::size_t>(ask_louder_first ? lo : hi)];
      qa.question = "is " + std::string(instrument_name(x.instrument)) + " louder than " +
                    std::string(instrument_name(y.instrument));
      qa.answer_index = answer_index(x.loudness > y.loudness ? "yes" : "no");
      const Mat arg1 = code_row(embedding.instruments, x.instrument);
      const Mat arg2 = code_row(embedding.instruments, y.instrument);
      qa.q_s = question_embedding(embedding, t, &arg1, &arg2);
      qa.q_w = question_words(embedding, t, &arg1, &arg2, question_tokens);
      return qa;
    }
    case Template::temporal: {
      int best = -1;
      bool tie = false;
      for (std::size_t i = 0; i < world.entities.size(); ++i) {
        if (best < 0 || world.entities[i].t_on < world.entities[static_cast<std::size_t>(best)].t_on) {
          best = static_cast<int>(i);
          tie = false;
        } else if (world.entities[i].t_on == world.entities[static_cast<std::size_t>(best)].t_on) {
          tie = true;
        }
      }
      if (tie) return std::nullopt;
      const Entity& e = world.entities[static_cast<std::size_t>(best)];
      qa.question = "which instrument sounds first";
      qa.answer_index = e.instrument;  // instrument words lead the answer vocabulary
      qa.q_s = question_embedding(embedding, t, nullptr, nullptr);
      qa.q_w = question_words(embedding, t, nullptr, nullptr, question_tokens);
      return qa;
    }
  }
  throw InvalidInputError("bad template");
}

int derive_answer(const WorldState& world, Template t, const std::string& question) {
  auto find_instrument = [&](std::size_t& pos) {
    for (int i = 0; i < kInstrumentCount; ++i) {
      const std::string name(instrument_name(i));
      const auto at = question.find(name, pos);
      if (at != std::string::npos && at == pos) {
        pos += name.size();
        return i;
      }
    }
    throw InvalidInputError("no instrument found in question: " + question);
  };

  switch (t) {
    case Template::existential: {
      std::size_t pos = 3;  // after "is "
      const int x = find_instrument(pos);
      for (const Entity& e : world.entities)
        if (e.instrument == x) return answer_index("yes");
      return answer_index("no");
    }
    case Template::counting: {
      const auto at = question.rfind(' ');
      const int seg = std::stoi(question.substr(at + 1));
      const char* words[] = {"zero", "one", "two", "three"};
      return answer_index(words[world.playing_count(seg)]);
    }
    case Template::localization: {
      std::size_t pos = 9;  // after "where is "
      const int x = find_instrument(pos);
      for (const Entity& e : world.entities)
        if (e.instrument == x) return answer_index(side_word(e.side));
      throw InvalidInputError("instrument not in world: " + question);
    }
    case Template::comparative: {
      std::size_t pos = 3;
      const int x = find_instrument(pos);
      pos += 13;  // " louder than "
      const int y = find_instrument(pos);
      int lx = -1, ly = -1;
      for (const Entity& e : world.entities) {
        if (e.instrument == x) lx = e.loudness;
        if (e.instrument == y) ly = e.loudness;
      }
      if (lx < 0 || ly < 0) throw InvalidInputError("instrument not in world: " + question);
      return answer_index(lx > ly ? "yes" : "no");
    }
    case Template::temporal: {
      int best = 0;
      for (std::size_t i = 1; i < world.entities.size(); ++i)
        if (world.entities[i].t_on < world.entities[static_cast<std::size_t>(best)].t_on)
          best = static_cast<int>(i);
      return world.entities[static_cast<std::size_t>(best)].instrument;
    }
  }
  throw InvalidInputError("bad template");
}

// ---- Base64 ----

namespace {

constexpr char kB64Alphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

int b64_value(char c) {
  if (c >= 'A' && c <= 'Z') return c - 'A';
  if (c >= 'a' && c <= 'z') return c - 'a' + 26;
  if (c >= '0' && c <= '9') return c - '0' + 52;
  if (c == '+') return 62;
  if (c == '/') return 63;
  throw SchemaError("bad base64 character");
}

std::string b64_encode(const std::vector<unsigned char>& bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  for (std::size_t i = 0; i < bytes.size(); i += 3) {
    const unsigned b0 = bytes[i];
    const unsigned b1 = i + 1 < bytes.size() ? bytes[i + 1] : 0;
    const unsigned b2 = i + 2 < bytes.size() ? bytes[i + 2] : 0;
    out.push_back(kB64Alphabet[b0 >> 2]);
    out.push_back(kB64Alphabet[((b0 & 3) << 4) | (b1 >> 4)]);
    out.push_back(i + 1 < bytes.size() ? kB64Alphabet[((b1 & 15) << 2) | (b2 >> 6)] : '=');
    out.push_back(i + 2 < bytes.size() ? kB64Alphabet[b2 & 63] : '=');
  }
  return out;
}

std::vector<unsigned char> b64_decode(const std::string& text) {
  if (text.size() % 4 != 0) throw SchemaError("bad base64 length");
  std::vector<unsigned char> out;
  out.reserve(text.size() / 4 * 3);
  for (std::size_t i = 0; i < text.size(); i += 4) {
    const int pad = (text[i + 3] == '=') + (text[i + 2] == '=');
    const int v0 = b64_value(text[i]);
    const int v1 = b64_value(text[i + 1]);
    const int v2 = pad >= 2 ? 0 : b64_value(text[i + 2]);
    const int v3 = pad >= 1 ? 0 : b64_value(text[i + 3]);
    out.push_back(static_cast<unsigned char>((v0 << 2) | (v1 >> 4)));
    if (pad < 2) out.push_back(static_cast<unsigned char>(((v1 & 15) << 4) | (v2 >> 2)));
    if (pad < 1) out.push_back(static_cast<unsigned char>(((v2 & 3) << 6) | v3));
  }
  return out;
}

}  // namespace

std::string encode_floats(const Mat& m) {
  std::vector<unsigned char> bytes;
  bytes.reserve(m.size() * 8);
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j) {
      const std::uint64_t v = std::bit_cast<std::uint64_t>(m(i, j));
      for (int k = 0; k < 8; ++k) bytes.push_back(static_cast<unsigned char>((v >> (8 * k)) & 0xff));
    }
  return b64_encode(bytes);
}

Mat decode_floats(const std::string& b64, int rows, int cols) {
  const auto bytes = b64_decode(b64);
  if (bytes.size() != static_cast<std::size_t>(rows) * cols * 8)
    throw SchemaError("decoded float array has the wrong size");
  Mat m(rows, cols);
  std::size_t at = 0;
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) {
      std::uint64_t v = 0;
      for (int k = 0; k < 8; ++k) v |= static_cast<std::uint64_t>(bytes[at++]) << (8 * k);
      m(i, j) = std::bit_cast<double>(v);
    }
  return m;
}

// ---- Dataset generation ----

namespace {

std::string video_id_of(int id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "vid_%06d", id);
  return buf;
}

}  // namespace

Instance gen_instance(const GenOptions& opts, const DatasetEmbedding& embedding, int id) {
  const Template t = static_cast<Template>(id % kTemplateCount);
  Rng rng(Rng::mix(opts.seed, static_cast<std::uint64_t>(id)));

  // Counting targets cycle per instance so the answer classes come out
  // uniform; the target stays fixed while the world is resampled.
  std::optional<int> counting_target;
  if (t == Template::counting) counting_target = (id / kTemplateCount) % 4;

  // Resample the world until the template target is realizable.
  WorldState world;
  std::optional<QaPart> qa;
  std::uint64_t world_seed = 0;
  for (int attempt = 0; attempt < 1000 && !qa; ++attempt) {
    world_seed = rng.next_u64();
    Rng world_rng(world_seed);
    world = gen_world(world_rng, opts.segments);
    qa = gen_qa(world, t, embedding, opts.question_tokens, rng, counting_target);
  }
  if (!qa) throw StateError("gen_instance: could not realize template after 1000 worlds");

  Instance inst;
  inst.id = id;
  inst.video_id = video_id_of(id);
  inst.world_seed = world_seed;
  inst.template_tag = std::string(template_name(t));
  inst.answer_index = qa->answer_index;
  inst.question = qa->question;
  Rng noise(Rng::mix(opts.seed, Rng::mix(0xFEA7, static_cast<std::uint64_t>(id))));
  auto features = world_to_features(world, embedding, opts.patch_tokens, noise, opts.eta);
  inst.f_v = std::move(features.f_v);
  inst.f_a = std::move(features.f_a);
  inst.f_p = std::move(features.f_p);
  inst.q_s = qa->q_s;
  inst.q_w = qa->q_w;
  inst.annotation = world_to_graphs(world, inst.video_id);
  return inst;
}

void gen_dataset(const GenOptions& opts, const std::string& out_dir) {
  if (opts.n < 1) throw InvalidInputError("gen_dataset: n must be positive");
  if (opts.train_ratio < 0 || opts.val_ratio < 0 || opts.train_ratio + opts.val_ratio > 1.0)
    throw InvalidInputError("gen_dataset: bad split ratios");
  const auto embedding = DatasetEmbedding::init(opts.dim, opts.segments, opts.seed);

  fs::create_directories(fs::path(out_dir) / "annotations");

  // Instances are generated per-id (embarrassingly parallel) and written in
  // id order so the output bytes do not depend on the worker count.
  const int threads = std::max(1, std::min(opts.threads, opts.n));
  std::vector<std::string> lines(static_cast<std::size_t>(opts.n));
  std::vector<std::string> annotations(static_cast<std::size_t>(opts.n));
  auto worker = [&](int begin, int step) {
    for (int id = begin; id < opts.n; id += step) {
      const Instance inst = gen_instance(opts, embedding, id);
      json j;
      j["id"] = inst.id;
      j["video_id"] = inst.video_id;
      j["world_seed"] = inst.world_seed;
      j["template"] = inst.template_tag;
      j["question"] = inst.question;
      j["answer_index"] = inst.answer_index;
      j["f_v"] = encode_floats(inst.f_v);
      j["f_a"] = encode_floats(inst.f_a);
      j["f_p"] = encode_floats(inst.f_p);
      j["q_s"] = encode_floats(inst.q_s);
      j["q_w"] = encode_floats(inst.q_w);
      lines[static_cast<std::size_t>(id)] = j.dump();
      annotations[static_cast<std::size_t>(id)] = scenegraph::serialize_annotation(inst.annotation);
    }
  };
  if (threads == 1) {
    worker(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < threads; ++w) pool.emplace_back(worker, w, threads);
    for (auto& th : pool) th.join();
  }

  {
    std::ofstream os(fs::path(out_dir) / "instances.jsonl", std::ios::trunc);
    if (!os) throw InvalidInputError("gen_dataset: cannot write instances.jsonl");
    for (const auto& line : lines) os << line << "\n";
  }
  for (int id = 0; id < opts.n; ++id) {
    std::ofstream os(fs::path(out_dir) / "annotations" / (video_id_of(id) + ".json"),
                     std::ios::trunc);
    os << annotations[static_cast<std::size_t>(id)] << "\n";
  }

  const int n_train = static_cast<int>(opts.train_ratio * opts.n + 0.5);
  const int n_val = static_cast<int>(opts.val_ratio * opts.n + 0.5);
  json manifest;
  manifest["dataset_seed"] = opts.seed;
  manifest["n"] = opts.n;
  manifest["eta"] = opts.eta;
  manifest["dims"] = {{"segments", opts.segments},
                      {"dim", opts.dim},
                      {"patch_tokens", opts.patch_tokens},
                      {"question_tokens", opts.question_tokens}};
  json splits;
  json train = json::array(), val = json::array(), test = json::array();
  for (int id = 0; id < opts.n; ++id) {
    if (id < n_train)
      train.push_back(id);
    else if (id < n_train + n_val)
      val.push_back(id);
    else
      test.push_back(id);
  }
  splits["train"] = std::move(train);
  splits["val"] = std::move(val);
  splits["test"] = std::move(test);
  manifest["splits"] = std::move(splits);
  manifest["counts"] = {{"train", n_train},
                        {"val", n_val},
                        {"test", opts.n - n_train - n_val}};
  json answers = json::array();
  for (const auto& w : answer_vocab()) answers.push_back(w);
  manifest["answer_vocab"] = std::move(answers);
  json templates = json::array();
  for (int i = 0; i < kTemplateCount; ++i) templates.push_back(std::string(template_name(static_cast<Template>(i))));
  manifest["templates"] = std::move(templates);

  std::ofstream os(fs::path(out_dir) / "manifest.json", std::ios::trunc);
  if (!os) throw InvalidInputError("gen_dataset: cannot write manifest.json");
  os << manifest.dump(2) << "\n";
}

ManifestInfo load_manifest(const std::string& dir) {
  std::ifstream is(fs::path(dir) / "manifest.json");
  if (!is) throw InvalidInputError("load_manifest: no manifest.json under " + dir);
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw SchemaError(std::string("manifest is not valid JSON: ") + e.what());
  }
  ManifestInfo m;
  m.seed = j.at("dataset_seed").get<std::uint64_t>();
  m.n = j.at("n").get<int>();
  m.eta = j.at("eta").get<double>();
  const auto& dims = j.at("dims");
  m.segments = dims.at("segments").get<int>();
  m.dim = dims.at("dim").get<int>();
  m.patch_tokens = dims.at("patch_tokens").get<int>();
  m.question_tokens = dims.at("question_tokens").get<int>();
  m.train_ids = j.at("splits").at("train").get<std::vector<int>>();
  m.val_ids = j.at("splits").at("val").get<std::vector<int>>();
  m.test_ids = j.at("splits").at("test").get<std::vector<int>>();
  return m;
}

Dataset load_dataset(const std::string& dir, const std::string& split) {
  const ManifestInfo m = load_manifest(dir);
  std::set<int> wanted;
  if (split == "train")
    wanted.insert(m.train_ids.begin(), m.train_ids.end());
  else if (split == "val")
    wanted.insert(m.val_ids.begin(), m.val_ids.end());
  else if (split == "test")
    wanted.insert(m.test_ids.begin(), m.test_ids.end());
  else if (split == "all") {
    for (int id = 0; id < m.n; ++id) wanted.insert(id);
  } else {
    throw InvalidInputError("load_dataset: unknown split '" + split + "'");
  }

  std::ifstream is(fs::path(dir) / "instances.jsonl");
  if (!is) throw InvalidInputError("load_dataset: no instances.jsonl under " + dir);
  Dataset dataset;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw SchemaError(std::string("bad instance line: ") + e.what());
    }
    const int id = j.at("id").get<int>();
    if (!wanted.count(id)) continue;
    Instance inst;
    inst.id = id;
    inst.video_id = j.at("video_id").get<std::string>();
    inst.world_seed = j.at("world_seed").get<std::uint64_t>();
    inst.template_tag = j.at("template").get<std::string>();
    inst.question = j.at("question").get<std::string>();
    inst.answer_index = j.at("answer_index").get<int>();
    inst.f_v = decode_floats(j.at("f_v").get<std::string>(), m.segments, m.dim);
    inst.f_a = decode_floats(j.at("f_a").get<std::string>(), m.segments, m.dim);
    inst.f_p = decode_floats(j.at("f_p").get<std::string>(), m.segments * m.patch_tokens, m.dim);
    inst.q_s = decode_floats(j.at("q_s").get<std::string>(), 1, m.dim);
    inst.q_w = decode_floats(j.at("q_w").get<std::string>(), m.question_tokens, m.dim);

    std::ifstream as(fs::path(dir) / "annotations" / (inst.video_id + ".json"));
    if (!as) throw InvalidInputError("load_dataset: missing annotation for " + inst.video_id);
    std::stringstream buf;
    buf << as.rdbuf();
    inst.annotation = scenegraph::parse_annotation(buf.str());
    dataset.push_back(std::move(inst));
  }
  return dataset;
}

}  // namespace shrike::synth
