#pragma once

// Synthetic multi-hop retrieval samples buried in filler text. A short fact
// chain is spread over ten slots of a shared noise context, distractor facts
// and rare tokens are sprinkled in, and every position carries a class label.
// A world-state oracle re-derives each answer from the token stream alone.

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "cdt/errors.hpp"
#include "cdt/jsonio.hpp"
#include "cdt/random.hpp"
#include "cdt/tensor.hpp"
#include "cdt/vocab.hpp"

namespace cdt::task {

enum class TokenClass : char { sup = 'S', inter = 'I', irr = 'R', low = 'L', query = 'Q', other = 'O' };

inline const char* to_string(TokenClass c) {
  switch (c) {
    case TokenClass::sup: return "Sup";
    case TokenClass::inter: return "Inter";
    case TokenClass::irr: return "Irr";
    case TokenClass::low: return "Low";
    case TokenClass::query: return "Query";
    case TokenClass::other: return "Other";
  }
  return "?";
}

inline TokenClass token_class_from(char c) {
  switch (c) {
    case 'S': return TokenClass::sup;
    case 'I': return TokenClass::inter;
    case 'R': return TokenClass::irr;
    case 'L': return TokenClass::low;
    case 'Q': return TokenClass::query;
    case 'O': return TokenClass::other;
  }
  throw IntegrityError(std::string("unknown class code '") + c + "'");
}

/// The four context classes attribution reports on, in report order.
inline constexpr TokenClass kContextClasses[] = {TokenClass::sup, TokenClass::inter, TokenClass::irr,
                                                 TokenClass::low};

enum class Predicate { move, pickup, drop };

struct Fact {
  int actor = -1;
  Predicate predicate = Predicate::move;
  int verb = -1;
  int argument = -1;
  std::vector<int> surface;
  friend bool operator==(const Fact&, const Fact&) = default;
};

inline constexpr std::size_t kFactLength = 5;

/// "{actor} {verb} the {argument} ."
inline Fact make_fact(int actor, Predicate p, int verb, int argument) {
  const auto& v = Vocabulary::instance();
  return {actor, p, verb, argument, {actor, verb, v.id("the"), argument, v.id(".")}};
}

/// Inverse of make_fact over a token window; nullopt when the window is not a fact.
inline std::optional<Fact> parse_fact(std::span<const int> t) {
  const auto& v = Vocabulary::instance();
  if (t.size() != kFactLength || t[2] != v.id("the") || t[4] != v.id(".")) return std::nullopt;
  if (v.kind(t[0]) != WordKind::actor) return std::nullopt;
  const WordKind vk = v.kind(t[1]), ak = v.kind(t[3]);
  if (vk == WordKind::move && ak == WordKind::location) return make_fact(t[0], Predicate::move, t[1], t[3]);
  if (vk == WordKind::pickup && ak == WordKind::object) return make_fact(t[0], Predicate::pickup, t[1], t[3]);
  if (vk == WordKind::drop && ak == WordKind::object) return make_fact(t[0], Predicate::drop, t[1], t[3]);
  return std::nullopt;
}

enum class QueryKind { current_location, before_location, prior_to_drop };

/// What the question asks about the queried object.
struct Query {
  QueryKind kind = QueryKind::prior_to_drop;
  int object = -1;
  int reference = -1;  // location named in "before the {y}" questions

  std::vector<int> surface() const {
    const auto& v = Vocabulary::instance();
    auto w = [&](const char* s) { return v.id(s); };
    switch (kind) {
      case QueryKind::current_location:
        return {w("where"), w("is"), w("the"), object, w("?")};
      case QueryKind::before_location:
        return {w("where"), w("was"), w("the"), object, w("before"), w("the"), reference, w("?")};
      case QueryKind::prior_to_drop:
        return {w("where"), w("was"), w("the"), object, w("prior"), w("to"), w("the"),
                w("place"), w("where"), w("the"), object, w("was"), w("dropped"), w("?")};
    }
    return {};
  }

  static Query parse(std::span<const int> t) {
    const auto& v = Vocabulary::instance();
    for (QueryKind k : {QueryKind::current_location, QueryKind::before_location, QueryKind::prior_to_drop}) {
      if (t.size() < 4) break;
      Query q{k, t[3], k == QueryKind::before_location && t.size() > 6 ? t[6] : -1};
      if (v.kind(q.object) != WordKind::object) break;
      const auto s = q.surface();
      if (std::equal(s.begin(), s.end(), t.begin(), t.end())) return q;
    }
    throw IntegrityError("question span is not a recognized question: '" + v.render(t) + "'");
  }

  friend bool operator==(const Query&, const Query&) = default;
};

inline std::size_t question_length(int hops) {
  return hops == 2 ? 5 : hops == 3 ? 8 : 14;
}

/// Replays facts through a world state and answers the query.
inline int oracle_answer(std::span<const Fact> facts, const Query& q) {
  std::map<int, int> actor_loc, holder;
  std::map<int, std::vector<int>> trail;  // distinct consecutive locations per object
  std::map<int, std::size_t> drop_mark;   // trail length when last dropped
  std::set<int> picked;
  auto visit = [&](int obj, int loc) {
    auto& t = trail[obj];
    if (t.empty() || t.back() != loc) t.push_back(loc);
  };
  for (const auto& f : facts) {
    switch (f.predicate) {
      case Predicate::move:
        actor_loc[f.actor] = f.argument;
        for (const auto& [obj, who] : holder)
          if (who == f.actor) visit(obj, f.argument);
        break;
      case Predicate::pickup:
        holder[f.argument] = f.actor;
        picked.insert(f.argument);
        if (auto it = actor_loc.find(f.actor); it != actor_loc.end()) visit(f.argument, it->second);
        break;
      case Predicate::drop: {
        auto it = holder.find(f.argument);
        if (it == holder.end() || it->second != f.actor)
          throw UnanswerableError("drop of an object the actor does not hold");
        holder.erase(it);
        drop_mark[f.argument] = trail[f.argument].size();
        break;
      }
    }
  }
  if (!picked.count(q.object)) throw UnanswerableError("queried object is never picked up");
  const auto& t = trail[q.object];
  switch (q.kind) {
    case QueryKind::current_location:
      if (t.empty()) throw UnanswerableError("object location never observed");
      return t.back();
    case QueryKind::before_location:
      for (std::size_t k = 1; k < t.size(); ++k)
        if (t[k] == q.reference) return t[k - 1];
      throw UnanswerableError("object never moved into the reference location");
    case QueryKind::prior_to_drop: {
      auto it = drop_mark.find(q.object);
      if (it == drop_mark.end()) throw UnanswerableError("queried object is never dropped");
      if (it->second < 2) throw UnanswerableError("no location precedes the drop location");
      return t[it->second - 2];
    }
  }
  throw UnanswerableError("unsupported query");
}

struct FactChain {
  std::vector<Fact> facts;
  int answer = -1;
  Query query;
};

inline std::vector<Predicate> chain_pattern(int hops) {
  using P = Predicate;
  switch (hops) {
    case 2: return {P::move, P::pickup};
    case 3: return {P::pickup, P::move, P::move};
    case 4: return {P::move, P::pickup, P::move, P::drop};
  }
  throw GenerationError("unsupported hop count " + std::to_string(hops));
}

inline FactChain make_fact_chain(int hops, const Vocabulary& v, Rng& rng) {
  const auto actors = v.ids_of(WordKind::actor);
  const auto locs = v.ids_of(WordKind::location);
  const auto objs = v.ids_of(WordKind::object);
  if (actors.empty() || objs.empty() || locs.size() < 2)
    throw GenerationError("vocabulary too small for a fact chain");
  chain_pattern(hops);  // rejects unsupported hop counts
  const int x = rng.pick(actors), o = rng.pick(objs);
  const auto two = rng.sample_indices(locs.size(), 2);
  const int y1 = locs[two[0]], y2 = locs[two[1]];
  auto verb = [&](WordKind k) { return rng.pick(v.ids_of(k)); };

  FactChain c;
  switch (hops) {
    case 2:
      c.facts = {make_fact(x, Predicate::move, verb(WordKind::move), y1),
                 make_fact(x, Predicate::pickup, verb(WordKind::pickup), o)};
      c.query = {QueryKind::current_location, o};
      break;
    case 3:
      c.facts = {make_fact(x, Predicate::pickup, verb(WordKind::pickup), o),
                 make_fact(x, Predicate::move, verb(WordKind::move), y1),
                 make_fact(x, Predicate::move, verb(WordKind::move), y2)};
      c.query = {QueryKind::before_location, o, y2};
      break;
    default:
      c.facts = {make_fact(x, Predicate::move, verb(WordKind::move), y1),
                 make_fact(x, Predicate::pickup, verb(WordKind::pickup), o),
                 make_fact(x, Predicate::move, verb(WordKind::move), y2),
                 make_fact(x, Predicate::drop, verb(WordKind::drop), o)};
      c.query = {QueryKind::prior_to_drop, o};
  }
  c.answer = y1;
  return c;
}

struct Interference {
  std::vector<Fact> facts;
  std::size_t after_final = 0;  // index of the fact that must follow the last supporting fact
};

/// Distractor facts by other actors about other objects. The distractors
/// form their own consistent mini-story, so replaying them never makes the
/// world state contradictory.
inline Interference make_interference(std::span<const Fact> supporting, const Vocabulary& v, Rng& rng) {
  if (supporting.empty()) throw GenerationError("no supporting facts to interfere with");
  std::set<int> used_actors, used_objects;
  for (const auto& f : supporting) {
    used_actors.insert(f.actor);
    if (f.predicate != Predicate::move) used_objects.insert(f.argument);
  }
  std::vector<int> actors, objects;
  for (int a : v.ids_of(WordKind::actor))
    if (!used_actors.count(a)) actors.push_back(a);
  for (int o : v.ids_of(WordKind::object))
    if (!used_objects.count(o)) objects.push_back(o);
  if (actors.empty() || objects.empty()) throw GenerationError("no disjoint actors or objects left for interference");

  const std::size_t hops = supporting.size();
  const auto count = static_cast<std::size_t>(rng.uniform_int(std::int64_t(hops), std::int64_t(2 * hops)));
  rng.shuffle(actors);
  actors.resize(std::min<std::size_t>(actors.size(), 3));
  rng.shuffle(objects);

  std::map<int, std::vector<int>> holding;
  std::size_t next_free = 0;
  Interference out;
  while (out.facts.size() < count) {
    const int z = rng.pick(actors);
    const auto roll = rng.index(3);
    if (roll == 1 && next_free < objects.size()) {
      const int o = objects[next_free++];
      holding[z].push_back(o);
      out.facts.push_back(make_fact(z, Predicate::pickup, rng.pick(v.ids_of(WordKind::pickup)), o));
    } else if (roll == 2 && !holding[z].empty()) {
      auto& h = holding[z];
      const auto k = rng.index(h.size());
      const int o = h[k];
      h.erase(h.begin() + static_cast<std::ptrdiff_t>(k));
      out.facts.push_back(make_fact(z, Predicate::drop, rng.pick(v.ids_of(WordKind::drop)), o));
    } else {
      out.facts.push_back(make_fact(z, Predicate::move, rng.pick(v.ids_of(WordKind::move)),
                                    rng.pick(v.ids_of(WordKind::location))));
    }
  }
  out.after_final = out.facts.size() - 1;
  return out;
}

struct GenSpec {
  int hops = 4;
  std::size_t sample_count = 100;
  std::size_t target_len_tokens = 256;
  std::size_t permute_count = 5;
  std::size_t inter_mult_min = 1;
  std::size_t inter_mult_max = 2;
  std::size_t low_frequency_count = 3;
  std::uint64_t seed = 0;

  json to_json() const {
    return {{"hops", hops},
            {"sample_count", sample_count},
            {"target_len_tokens", target_len_tokens},
            {"permute_count", permute_count},
            {"interference_multiplier", {inter_mult_min, inter_mult_max}},
            {"low_frequency_count", low_frequency_count},
            {"seed", seed}};
  }

  static GenSpec from_json(const json& j) {
    const std::string w = "gen spec";
    reject_unknown_keys(j, {"hops", "sample_count", "target_len_tokens", "permute_count",
                            "interference_multiplier", "low_frequency_count", "seed"},
                        w);
    GenSpec s;
    s.hops = get_required<int>(j, "hops", w);
    s.sample_count = get_required<std::size_t>(j, "sample_count", w);
    s.target_len_tokens = get_required<std::size_t>(j, "target_len_tokens", w);
    s.permute_count = get_or<std::size_t>(j, "permute_count", s.permute_count, w);
    auto mult = get_or<std::vector<std::size_t>>(j, "interference_multiplier", {1, 2}, w);
    if (mult.size() != 2) throw ConfigError(w + ".interference_multiplier: expected [min, max]");
    s.inter_mult_min = mult[0];
    s.inter_mult_max = mult[1];
    s.low_frequency_count = get_or<std::size_t>(j, "low_frequency_count", s.low_frequency_count, w);
    s.seed = get_or<std::uint64_t>(j, "seed", 0, w);
    s.validate();
    return s;
  }

  void validate() const;
};

inline std::size_t choose(std::size_t n, std::size_t k) {
  std::size_t r = 1;
  for (std::size_t i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}

inline constexpr std::size_t kSlots = 10;

inline void GenSpec::validate() const {
  if (hops < 2 || hops > 4) throw ConfigError("hops must be 2, 3 or 4");
  if (inter_mult_min != 1 || inter_mult_max != 2)
    throw ConfigError("interference multiplier range is fixed at [1, 2]");
  if (permute_count == 0 || permute_count > choose(kSlots, std::size_t(hops)))
    throw ConfigError("permute_count must lie in [1, " + std::to_string(choose(kSlots, std::size_t(hops))) + "]");
  if (low_frequency_count > Vocabulary::kLowFrequency)
    throw ConfigError("low_frequency_count exceeds the reserved low-frequency block");
}

/// Tokens reserved for everything except filler at the longest possible draw.
inline std::size_t reserved_tokens(const GenSpec& s) {
  const std::size_t h = std::size_t(s.hops);
  return 1 + kFactLength * (h + s.inter_mult_max * h) + s.low_frequency_count + question_length(s.hops) + 1;
}

struct NoiseContext {
  std::vector<std::vector<int>> sentences;
  std::size_t token_count() const {
    std::size_t n = 0;
    for (const auto& s : sentences) n += s.size();
    return n;
  }
};

/// Filler sentences shared by every sample of one target length.
inline NoiseContext make_noise(std::uint64_t seed, std::size_t budget_tokens) {
  const auto& v = Vocabulary::instance();
  const auto words = v.ids_of(WordKind::noise);
  Rng rng(derive_seed(seed, 0x6e6f697365ULL ^ budget_tokens));
  NoiseContext nc;
  std::size_t used = 0;
  for (;;) {
    const auto len = static_cast<std::size_t>(rng.uniform_int(4, 7));
    if (used + len > budget_tokens) break;
    std::vector<int> s;
    for (std::size_t i = 0; i + 1 < len; ++i) s.push_back(rng.pick(words));
    s.push_back(v.id("."));
    used += len;
    nc.sentences.push_back(std::move(s));
  }
  return nc;
}

/// Index of the first sentence of each of ten equal-token chunks. When one
/// long sentence straddles two boundaries the later chunk starts at the next
/// sentence, so the ten starts are always distinct.
inline std::vector<std::size_t> chunk_starts(const NoiseContext& nc) {
  const std::size_t total = nc.token_count();
  const std::size_t count = nc.sentences.size();
  if (count < kSlots) throw GenerationError("noise context too short for ten chunks");
  std::vector<std::size_t> starts;
  std::size_t acc = 0, i = 0;
  for (std::size_t k = 0; k < kSlots; ++k) {
    std::size_t lo = starts.empty() ? 0 : starts.back() + 1;
    while (i < lo) acc += nc.sentences[i++].size();
    while (i < count && acc * kSlots < k * total) acc += nc.sentences[i++].size();
    // leave room for the remaining chunks
    starts.push_back(std::min(i, count - (kSlots - k)));
    if (i > starts.back()) {
      i = starts.back();
      acc = 0;
      for (std::size_t t = 0; t < i; ++t) acc += nc.sentences[t].size();
    }
  }
  return starts;
}

/// All k-subsets of [0, n) in lexicographic order.
inline std::vector<std::vector<int>> slot_combinations(std::size_t n, std::size_t k) {
  std::vector<std::vector<int>> out;
  std::vector<int> cur;
  auto rec = [&](auto&& self, int start) -> void {
    if (cur.size() == k) {
      out.push_back(cur);
      return;
    }
    for (int i = start; i < int(n); ++i) {
      cur.push_back(i);
      self(self, i + 1);
      cur.pop_back();
    }
  };
  rec(rec, 0);
  return out;
}

struct SampleMeta {
  std::vector<int> slots;
  std::size_t combination_index = 0;
  std::size_t interference_count = 0;
  std::size_t target_len = 0;
  friend bool operator==(const SampleMeta&, const SampleMeta&) = default;
};

struct LabeledSample {
  std::vector<int> tokens;
  std::vector<TokenClass> classes;
  Span question_span;
  std::vector<int> answer_tokens;
  int hops = 0;
  std::uint64_t seed = 0;
  SampleMeta meta;

  std::size_t size() const { return tokens.size(); }
  Span answer_span() const { return {tokens.size() - answer_tokens.size(), tokens.size()}; }
  /// Context is everything before the question.
  std::size_t context_end() const { return question_span.begin; }

  std::vector<std::size_t> positions(TokenClass c) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < classes.size(); ++i)
      if (classes[i] == c) out.push_back(i);
    return out;
  }

  /// Positions exempt from denoising: question and answer.
  std::vector<std::uint8_t> protect_mask() const {
    std::vector<std::uint8_t> m(tokens.size(), 0);
    for (std::size_t i = question_span.begin; i < tokens.size(); ++i) m[i] = 1;
    return m;
  }

  bool held_out() const { return (seed & 1ULL) != 0; }

  json to_json() const {
    std::string cls;
    for (auto c : classes) cls.push_back(static_cast<char>(c));
    return {{"tokens", tokens},
            {"classes", cls},
            {"question_span", {question_span.begin, question_span.end}},
            {"answer_tokens", answer_tokens},
            {"hops", hops},
            {"seed", seed},
            {"meta",
             {{"slots", meta.slots},
              {"combination_index", meta.combination_index},
              {"interference_count", meta.interference_count},
              {"target_len", meta.target_len}}}};
  }

  static LabeledSample from_json(const json& j) {
    try {
      LabeledSample s;
      s.tokens = j.at("tokens").get<std::vector<int>>();
      for (char c : j.at("classes").get<std::string>()) s.classes.push_back(token_class_from(c));
      const auto q = j.at("question_span").get<std::vector<std::size_t>>();
      if (q.size() != 2) throw IntegrityError("question_span must have two entries");
      s.question_span = {q[0], q[1]};
      s.answer_tokens = j.at("answer_tokens").get<std::vector<int>>();
      s.hops = j.at("hops").get<int>();
      s.seed = j.at("seed").get<std::uint64_t>();
      const auto& m = j.at("meta");
      s.meta.slots = m.at("slots").get<std::vector<int>>();
      s.meta.combination_index = m.at("combination_index").get<std::size_t>();
      s.meta.interference_count = m.at("interference_count").get<std::size_t>();
      s.meta.target_len = m.at("target_len").get<std::size_t>();
      return s;
    } catch (const json::exception& e) {
      throw IntegrityError(std::string("malformed sample record: ") + e.what());
    }
  }

  friend bool operator==(const LabeledSample&, const LabeledSample&) = default;
};

namespace detail {
struct Piece {
  std::vector<int> tokens;
  TokenClass cls;
};
}  // namespace detail

/// Lays the chain over the noise slots, scatters interference and rare
/// tokens, and labels every position.
inline LabeledSample assemble_context(const NoiseContext& noise, const FactChain& chain, const Interference& inter,
                                      const GenSpec& spec, const std::vector<int>& slots, Rng& rng) {
  using detail::Piece;
  const auto& v = Vocabulary::instance();
  if (slots.size() != chain.facts.size()) throw GenerationError("slot combination does not match chain length");
  if (!std::is_sorted(slots.begin(), slots.end()) ||
      std::adjacent_find(slots.begin(), slots.end()) != slots.end())
    throw GenerationError("slot combination must be strictly increasing");
  const auto starts = chunk_starts(noise);

  std::vector<Piece> pieces;
  for (const auto& s : noise.sentences) pieces.push_back({s, TokenClass::irr});
  for (std::size_t i = chain.facts.size(); i-- > 0;) {
    const auto at = static_cast<std::ptrdiff_t>(starts[std::size_t(slots[i])]);
    pieces.insert(pieces.begin() + at, {chain.facts[i].surface, TokenClass::sup});
  }

  std::size_t last_sup = 0;
  for (std::size_t i = 0; i < pieces.size(); ++i)
    if (pieces[i].cls == TokenClass::sup) last_sup = i;
  const std::size_t p = pieces.size();
  std::vector<std::size_t> at;
  for (std::size_t k = 0; k < inter.facts.size(); ++k) at.push_back(rng.index(p + 1));
  std::sort(at.begin(), at.end());
  // Boundary b inserts before piece b, so b > last_sup lands after it.
  if (at.back() <= last_sup) at.back() = last_sup + 1 + rng.index(p - last_sup);
  for (std::size_t k = inter.facts.size(); k-- > 0;)
    pieces.insert(pieces.begin() + static_cast<std::ptrdiff_t>(at[k]), {inter.facts[k].surface, TokenClass::inter});

  const auto lows = v.ids_of(WordKind::low_frequency);
  for (auto idx : rng.sample_indices(lows.size(), spec.low_frequency_count)) {
    const auto b = rng.index(pieces.size() + 1);
    pieces.insert(pieces.begin() + static_cast<std::ptrdiff_t>(b), {{lows[idx]}, TokenClass::low});
  }

  LabeledSample s;
  s.tokens.push_back(v.id("<bos>"));
  s.classes.push_back(TokenClass::other);
  for (const auto& pc : pieces) {
    s.tokens.insert(s.tokens.end(), pc.tokens.begin(), pc.tokens.end());
    s.classes.insert(s.classes.end(), pc.tokens.size(), pc.cls);
  }
  const auto q = chain.query.surface();
  s.question_span = {s.tokens.size(), s.tokens.size() + q.size()};
  s.tokens.insert(s.tokens.end(), q.begin(), q.end());
  s.classes.insert(s.classes.end(), q.size(), TokenClass::query);
  s.answer_tokens = {chain.answer};
  s.tokens.push_back(chain.answer);
  s.classes.push_back(TokenClass::other);
  s.hops = spec.hops;
  s.meta.slots = slots;
  s.meta.interference_count = inter.facts.size();
  s.meta.target_len = spec.target_len_tokens;
  return s;
}

/// Facts of one class, re-parsed from the token stream in context order.
inline std::vector<Fact> parse_class_facts(const LabeledSample& s, TokenClass c) {
  std::vector<Fact> out;
  std::size_t i = 0;
  const std::size_t end = s.context_end();
  while (i < end) {
    if (s.classes[i] != c) {
      ++i;
      continue;
    }
    if (i + kFactLength > end) throw IntegrityError("truncated fact at position " + std::to_string(i));
    auto f = parse_fact(std::span<const int>(s.tokens).subspan(i, kFactLength));
    if (!f) throw IntegrityError("unparseable fact at position " + std::to_string(i));
    for (std::size_t k = i; k < i + kFactLength; ++k)
      if (s.classes[k] != c) throw IntegrityError("fact labels split at position " + std::to_string(k));
    out.push_back(*f);
    i += kFactLength;
  }
  return out;
}

/// Every fact in context order (supporting and interference interleaved).
inline std::vector<Fact> parse_all_facts(const LabeledSample& s) {
  std::vector<Fact> out;
  for (std::size_t i = 0; i < s.context_end();) {
    if (s.classes[i] == TokenClass::sup || s.classes[i] == TokenClass::inter) {
      auto f = parse_fact(std::span<const int>(s.tokens).subspan(i, std::min(kFactLength, s.context_end() - i)));
      if (!f) throw IntegrityError("unparseable fact at position " + std::to_string(i));
      out.push_back(*f);
      i += kFactLength;
    } else {
      ++i;
    }
  }
  return out;
}

/// Re-checks every construction constraint from the serialized form alone.
/// Returns the list of violated constraints (empty when the sample is sound).
inline std::vector<std::string> validate(const LabeledSample& s) {
  const auto& v = Vocabulary::instance();
  std::vector<std::string> bad;
  auto fail = [&](std::string m) { bad.push_back(std::move(m)); };
  const std::size_t n = s.tokens.size();
  if (s.classes.size() != n) return {"classes length differs from tokens length"};
  if (s.question_span.begin >= s.question_span.end || s.question_span.end > n)
    return {"question span out of bounds"};
  if (s.answer_tokens.empty() || s.question_span.end + s.answer_tokens.size() != n)
    return {"answer tokens do not close the sequence"};
  for (int t : s.tokens)
    if (t < 0 || std::size_t(t) >= v.size()) return {"token id outside vocabulary"};

  for (std::size_t i = 0; i < s.context_end(); ++i) {
    const WordKind k = v.kind(s.tokens[i]);
    switch (s.classes[i]) {
      case TokenClass::irr:
        if (k != WordKind::noise && s.tokens[i] != v.id(".")) fail("Irr token outside the filler vocabulary");
        break;
      case TokenClass::low:
        if (k != WordKind::low_frequency) fail("Low token outside the low-frequency block");
        break;
      case TokenClass::query:
        fail("Query label inside the context");
        break;
      default:
        break;
    }
  }
  for (std::size_t i = s.question_span.begin; i < s.question_span.end; ++i)
    if (s.classes[i] != TokenClass::query) fail("question span not labelled Query");

  std::vector<Fact> sup, inter, all;
  try {
    sup = parse_class_facts(s, TokenClass::sup);
    inter = parse_class_facts(s, TokenClass::inter);
    all = parse_all_facts(s);
  } catch (const IntegrityError& e) {
    fail(e.what());
    return bad;
  }

  const auto pattern = chain_pattern(s.hops);
  if (sup.size() != pattern.size()) {
    fail("supporting fact count differs from hops");
  } else {
    for (std::size_t i = 0; i < sup.size(); ++i) {
      if (sup[i].predicate != pattern[i]) fail("supporting facts out of chain order");
      if (sup[i].actor != sup[0].actor) fail("supporting facts mix actors");
    }
  }
  const std::size_t h = std::size_t(s.hops);
  if (inter.size() < h || inter.size() > 2 * h) fail("interference count outside [hops, 2*hops]");
  if (inter.size() != s.meta.interference_count) fail("interference count disagrees with meta");

  std::set<int> sup_objects;
  for (const auto& f : sup)
    if (f.predicate != Predicate::move) sup_objects.insert(f.argument);
  for (const auto& f : inter)
    if (f.predicate != Predicate::move && sup_objects.count(f.argument)) fail("interference reuses a supporting object");

  std::size_t last_sup = 0, last_inter = 0;
  bool any_sup = false, any_inter = false;
  for (std::size_t i = 0; i < n; ++i) {
    if (s.classes[i] == TokenClass::sup) last_sup = i, any_sup = true;
    if (s.classes[i] == TokenClass::inter) last_inter = i, any_inter = true;
  }
  if (!any_sup || !any_inter || last_inter < last_sup) fail("no interference after the last supporting fact");

  std::set<int> lows;
  for (auto i : s.positions(TokenClass::low))
    if (!lows.insert(s.tokens[i]).second) fail("low-frequency token repeated within a sample");

  try {
    const Query q = Query::parse(std::span<const int>(s.tokens).subspan(s.question_span.begin, s.question_span.size()));
    if (oracle_answer(all, q) != s.answer_tokens[0]) fail("oracle answer disagrees with the label");
  } catch (const Error& e) {
    fail(std::string("oracle: ") + e.what());
  }
  return bad;
}

struct AuditEntry {
  std::size_t index;
  std::vector<std::string> failures;
};

struct Manifest {
  json spec;
  std::vector<std::uint64_t> seeds;
  std::size_t audited = 0;
  std::vector<AuditEntry> failures;
  std::string corpus_digest;
  std::size_t noise_tokens = 0;

  bool passed() const { return failures.empty(); }

  json to_json() const {
    json f = json::array();
    for (const auto& e : failures) f.push_back({{"index", e.index}, {"failures", e.failures}});
    return {{"spec", spec},
            {"seeds", seeds},
            {"audit", {{"audited", audited}, {"passed", audited - failures.size()}, {"failures", f}}},
            {"noise_tokens", noise_tokens},
            {"corpus_digest", corpus_digest}};
  }
};

struct Dataset {
  std::vector<LabeledSample> samples;
  Manifest manifest;
};

/// One record per line, in index order.
inline std::string to_jsonl(std::span<const LabeledSample> samples) {
  std::string out;
  for (const auto& s : samples) {
    out += s.to_json().dump();
    out += '\n';
  }
  return out;
}

inline std::string corpus_digest(std::span<const LabeledSample> samples) {
  Digest d;
  for (const auto& s : samples) d.update_line(s.to_json().dump());
  return d.hex();
}

inline std::vector<LabeledSample> from_jsonl(std::string_view text) {
  std::vector<LabeledSample> out;
  std::size_t line = 0, pos = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    ++line;
    const auto row = text.substr(pos, nl - pos);
    pos = nl + 1;
    if (row.empty()) continue;
    try {
      out.push_back(LabeledSample::from_json(json::parse(row)));
    } catch (const json::exception& e) {
      throw IntegrityError("dataset line " + std::to_string(line) + ": " + e.what());
    } catch (const IntegrityError& e) {
      throw IntegrityError("dataset line " + std::to_string(line) + ": " + e.what());
    }
  }
  return out;
}

inline constexpr int kMaxRetries = 8;

/// Deterministic corpus for a spec. Sample i draws from its own derived
/// seed, so samples can be generated independently of each other.
inline Dataset gen_dataset(const GenSpec& spec) {
  spec.validate();
  const auto& v = Vocabulary::instance();
  const std::size_t reserve = reserved_tokens(spec);
  if (spec.target_len_tokens <= reserve) throw GenerationError("target length leaves no room for filler");
  const NoiseContext noise = make_noise(spec.seed, spec.target_len_tokens - reserve);
  chunk_starts(noise);  // fails early when the filler cannot form ten chunks

  auto all = slot_combinations(kSlots, std::size_t(spec.hops));
  Rng pick_rng(derive_seed(spec.seed, 0x736c6f7473ULL));
  std::vector<std::size_t> chosen = pick_rng.sample_indices(all.size(), spec.permute_count);

  Dataset ds;
  ds.manifest.spec = spec.to_json();
  ds.manifest.noise_tokens = noise.token_count();
  for (std::size_t i = 0; i < spec.sample_count; ++i) {
    const std::uint64_t seed = derive_seed(spec.seed, i);
    Rng rng(seed);
    std::vector<std::string> last;
    bool ok = false;
    for (int attempt = 0; attempt < kMaxRetries && !ok; ++attempt) {
      try {
        const auto combo_idx = rng.index(chosen.size());
        const auto chain = make_fact_chain(spec.hops, v, rng);
        const auto inter = make_interference(chain.facts, v, rng);
        auto s = assemble_context(noise, chain, inter, spec, all[chosen[combo_idx]], rng);
        s.seed = seed;
        s.meta.combination_index = chosen[combo_idx];
        last = validate(s);
        if (last.empty()) {
          ds.samples.push_back(std::move(s));
          ok = true;
        }
      } catch (const GenerationError& e) {
        last = {e.what()};
      }
    }
    if (!ok) {
      std::string why = last.empty() ? "unknown" : last.front();
      throw GenerationError("sample " + std::to_string(i) + ": constraints unmet after retries: " + why);
    }
    ds.manifest.seeds.push_back(seed);
  }
  ds.manifest.audited = ds.samples.size();
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    auto f = validate(ds.samples[i]);
    if (!f.empty()) ds.manifest.failures.push_back({i, std::move(f)});
  }
  ds.manifest.corpus_digest = corpus_digest(ds.samples);
  return ds;
}

/// Held-out split by sample-seed parity.
inline std::pair<std::vector<LabeledSample>, std::vector<LabeledSample>> split_by_parity(
    std::span<const LabeledSample> samples) {
  std::pair<std::vector<LabeledSample>, std::vector<LabeledSample>> out;
  for (const auto& s : samples) (s.held_out() ? out.second : out.first).push_back(s);
  return out;
}

}  // namespace cdt::task
