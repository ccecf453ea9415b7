#include "spd/taskgen.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <fstream>
#include <set>
#include <unordered_set>

#include "json.hpp"

namespace spd {

// ---- tokenizer --------------------------------------------------------------

const std::string& Tokenizer::alphabet() {
  static const std::string a =
      std::string("$\n #()*+,-.:=?[]_") + "0123456789" + "abcdefghijklmnopqrstuvwxyz" + "ABCDQ";
  return a;
}

namespace {

const std::array<int, 256>& char_table() {
  static const std::array<int, 256> table = [] {
    std::array<int, 256> t{};
    t.fill(-1);
    const auto& a = Tokenizer::alphabet();
    for (std::size_t i = 0; i < a.size(); ++i) t[static_cast<unsigned char>(a[i])] = static_cast<int>(i);
    return t;
  }();
  return table;
}

}  // namespace

int Tokenizer::vocab_size() { return static_cast<int>(alphabet().size()); }

TokenId Tokenizer::id(char c) {
  const int v = char_table()[static_cast<unsigned char>(c)];
  if (v < 0) throw TokenizeError(std::string("character outside the task alphabet: '") + c + "'");
  return v;
}

char Tokenizer::ch(TokenId id) {
  if (id < 0 || id >= vocab_size()) throw TokenizeError("token id outside the vocabulary");
  return alphabet()[static_cast<std::size_t>(id)];
}

TokenSeq Tokenizer::encode(std::string_view s) {
  TokenSeq out;
  out.reserve(s.size());
  for (char c : s) out.push_back(id(c));
  return out;
}

std::string Tokenizer::decode(std::span<const TokenId> ids) {
  std::string s;
  s.reserve(ids.size());
  for (TokenId t : ids) s.push_back(ch(t));
  return s;
}

bool Tokenizer::covers(std::string_view s) {
  return std::all_of(s.begin(), s.end(),
                     [](char c) { return char_table()[static_cast<unsigned char>(c)] >= 0; });
}

std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::Math: return "math";
    case TaskKind::Choice: return "choice";
    case TaskKind::Program: return "program";
  }
  return "?";
}

TaskKind parse_task_kind(const std::string& s) {
  if (s == "math") return TaskKind::Math;
  if (s == "choice") return TaskKind::Choice;
  if (s == "program") return TaskKind::Program;
  throw Error("unknown task kind '" + s + "'");
}

std::vector<TaskKind> all_task_kinds() { return {TaskKind::Math, TaskKind::Choice, TaskKind::Program}; }

namespace {

int uniform_int(Rng& rng, int lo, int hi) {
  // inclusive bounds; modulo bias is irrelevant at these ranges
  return lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
}

template <class T>
const T& pick(Rng& rng, const std::vector<T>& v) {
  return v[rng() % v.size()];
}

template <class T>
void shuffle(Rng& rng, std::vector<T>& v) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng() % i]);
}

// View up to (not including) the first end-of-answer sentinel.
std::string_view until_eos(std::string_view s) {
  const auto p = s.find(Tokenizer::kEos);
  return p == std::string_view::npos ? s : s.substr(0, p);
}

bool consume(std::string_view& s, std::string_view lit) {
  if (s.substr(0, lit.size()) != lit) return false;
  s.remove_prefix(lit.size());
  return true;
}

std::optional<int> consume_int(std::string_view& s) {
  std::size_t n = 0;
  while (n < s.size() && n < 6 && s[n] >= '0' && s[n] <= '9') ++n;
  if (n == 0) return std::nullopt;
  int v = 0;
  std::from_chars(s.data(), s.data() + n, v);
  s.remove_prefix(n);
  return v;
}

std::string consume_word(std::string_view& s) {
  std::size_t n = 0;
  while (n < s.size() && s[n] >= 'a' && s[n] <= 'z') ++n;
  std::string w(s.substr(0, n));
  s.remove_prefix(n);
  return w;
}

}  // namespace

// ---- math -------------------------------------------------------------------

namespace math_task {

namespace {
const std::vector<std::string> kNames = {"ann", "bob", "cal", "dee", "eli", "fay", "gus", "hal",
                                         "ivy", "jon", "kim", "lea", "max", "ned", "oli", "pam"};
const std::vector<std::string> kObjects = {"eggs", "pens", "cups", "keys",
                                           "hats", "bags", "coins", "rocks"};
}  // namespace

int Problem::result() const {
  int v = start;
  for (int d : deltas) v += d;
  return v;
}

std::string render_prompt(const Problem& p) {
  std::string s = p.name + " has " + std::to_string(p.start) + " " + p.object;
  for (int d : p.deltas) s += d >= 0 ? ", gets " + std::to_string(d) : ", loses " + std::to_string(-d);
  return s + ". how many?\n";
}

std::string render_answer(const Problem& p) {
  std::string s;
  int cur = p.start;
  for (int d : p.deltas) {
    const int next = cur + d;
    s += std::to_string(cur) + (d >= 0 ? "+" : "-") + std::to_string(std::abs(d)) + "=" +
         std::to_string(next) + "\n";
    cur = next;
  }
  return s + "#### " + std::to_string(cur) + Tokenizer::kEos;
}

std::optional<Problem> parse_prompt(std::string_view s) {
  Problem p;
  p.name = consume_word(s);
  if (p.name.empty() || !consume(s, " has ")) return std::nullopt;
  auto a = consume_int(s);
  if (!a || !consume(s, " ")) return std::nullopt;
  p.start = *a;
  p.object = consume_word(s);
  if (p.object.empty()) return std::nullopt;
  while (consume(s, ", ")) {
    const std::string verb = consume_word(s);
    if (!consume(s, " ")) return std::nullopt;
    auto b = consume_int(s);
    if (!b) return std::nullopt;
    if (verb == "gets") p.deltas.push_back(*b);
    else if (verb == "loses") p.deltas.push_back(-*b);
    else return std::nullopt;
  }
  if (p.deltas.empty() || !consume(s, ". how many?")) return std::nullopt;
  return p;
}

std::optional<long long> final_answer(std::string_view text) {
  text = until_eos(text);
  const auto p = text.rfind("#### ");
  if (p == std::string_view::npos) return std::nullopt;
  std::string_view rest = text.substr(p + 5);
  bool neg = consume(rest, "-");
  std::size_t n = 0;
  while (n < rest.size() && n < 12 && rest[n] >= '0' && rest[n] <= '9') ++n;
  if (n == 0) return std::nullopt;
  long long v = 0;
  std::from_chars(rest.data(), rest.data() + n, v);
  return neg ? -v : v;
}

Example draw(Rng& rng) {
  Problem p;
  p.name = pick(rng, kNames);
  p.object = pick(rng, kObjects);
  p.start = uniform_int(rng, 1, 29);
  const int steps = uniform_int(rng, 1, 2);
  int cur = p.start;
  for (int i = 0; i < steps; ++i) {
    const int b = uniform_int(rng, 1, 9);
    const bool lose = (rng() & 1) && cur >= b;
    p.deltas.push_back(lose ? -b : b);
    cur += p.deltas.back();
  }
  return Example{render_prompt(p), render_answer(p), TaskKind::Math};
}

}  // namespace math_task

// ---- multiple choice ----------------------------------------------------------

namespace choice_task {

namespace {
const std::vector<std::string> kCreatures = {"zib", "mop", "kel", "vux", "tam", "rog",
                                             "pim", "dax", "fen", "gub", "hox", "jav",
                                             "lum", "nib", "pok", "quz", "ryx", "sol",
                                             "tiv", "wub", "yem", "zog", "bex", "cof"};
const std::vector<std::string> kColors = {"red", "blue", "green", "gold",
                                          "pink", "gray", "tan", "black"};
const std::vector<std::string> kHomes = {"lake", "cave", "hill", "tree",
                                         "sand", "moss", "reef", "field"};

const std::vector<std::string>& values(Attribute a) { return a == Attribute::Color ? kColors : kHomes; }

std::string question_line(const std::string& creature, Attribute a) {
  return a == Attribute::Color ? "Q: what color is a " + creature + "?\n"
                               : "Q: where does a " + creature + " live?\n";
}
}  // namespace

const std::vector<std::string>& creatures() { return kCreatures; }

std::string fact(const std::string& creature, Attribute attr) {
  const auto it = std::find(kCreatures.begin(), kCreatures.end(), creature);
  if (it == kCreatures.end()) throw Error("unknown creature '" + creature + "'");
  const auto i = static_cast<std::size_t>(it - kCreatures.begin());
  return attr == Attribute::Color ? kColors[(i * 3 + 1) % kColors.size()]
                                  : kHomes[(i * 5 + 2) % kHomes.size()];
}

std::string render_prompt(const Question& q) {
  std::string s = question_line(q.creature, q.attribute);
  for (std::size_t i = 0; i < q.options.size(); ++i)
    s += std::string(1, static_cast<char>('A' + i)) + ". " + q.options[i] + "\n";
  return s;
}

char gold_letter(const Question& q) {
  const std::string truth = fact(q.creature, q.attribute);
  for (std::size_t i = 0; i < q.options.size(); ++i)
    if (q.options[i] == truth) return static_cast<char>('A' + i);
  throw Error("question has no correct option");
}

std::optional<Question> parse_prompt(std::string_view s) {
  Question q;
  if (consume(s, "Q: what color is a ")) {
    q.attribute = Attribute::Color;
    q.creature = consume_word(s);
    if (!consume(s, "?\n")) return std::nullopt;
  } else if (consume(s, "Q: where does a ")) {
    q.attribute = Attribute::Home;
    q.creature = consume_word(s);
    if (!consume(s, " live?\n")) return std::nullopt;
  } else {
    return std::nullopt;
  }
  if (std::find(kCreatures.begin(), kCreatures.end(), q.creature) == kCreatures.end())
    return std::nullopt;
  for (char letter : {'A', 'B', 'C', 'D'}) {
    if (!consume(s, std::string(1, letter) + ". ")) return std::nullopt;
    q.options.push_back(consume_word(s));
    if (!consume(s, "\n")) return std::nullopt;
  }
  return q;
}

std::optional<char> answer_letter(std::string_view completion) {
  completion = until_eos(completion);
  const auto p = completion.find("Answer: ");
  if (p == std::string_view::npos || p + 8 >= completion.size()) return std::nullopt;
  const char c = completion[p + 8];
  if (c < 'A' || c > 'D') return std::nullopt;
  return c;
}

Example draw(Rng& rng) {
  Question q;
  q.creature = pick(rng, kCreatures);
  q.attribute = (rng() & 1) ? Attribute::Home : Attribute::Color;
  const std::string truth = fact(q.creature, q.attribute);
  std::vector<std::string> pool;
  for (const auto& v : values(q.attribute))
    if (v != truth) pool.push_back(v);
  shuffle(rng, pool);
  q.options = {truth, pool[0], pool[1], pool[2]};
  shuffle(rng, q.options);
  return Example{render_prompt(q), std::string("Answer: ") + gold_letter(q) + Tokenizer::kEos,
                 TaskKind::Choice};
}

}  // namespace choice_task

// ---- mini-DSL programs --------------------------------------------------------

namespace program_task {

const std::vector<std::string>& op_names() {
  static const std::vector<std::string> n = {"rev", "sort", "inc", "dec", "tail"};
  return n;
}

std::optional<Op> parse_op(std::string_view name) {
  const auto& n = op_names();
  for (std::size_t i = 0; i < n.size(); ++i)
    if (n[i] == name) return static_cast<Op>(i);
  return std::nullopt;
}

std::string op_name(Op op) { return op_names()[static_cast<std::size_t>(op)]; }

List apply(Op op, const List& xs) {
  List out = xs;
  switch (op) {
    case Op::Rev: std::reverse(out.begin(), out.end()); break;
    case Op::Sort: std::sort(out.begin(), out.end()); break;
    case Op::Inc:
      for (int& x : out) x = (x + 1) % 10;
      break;
    case Op::Dec:
      for (int& x : out) x = (x + 9) % 10;
      break;
    case Op::Tail:
      if (!out.empty()) out.erase(out.begin());
      break;
  }
  return out;
}

List run(const std::vector<Op>& ops, const List& xs) {
  List cur = xs;
  for (Op op : ops) cur = program_task::apply(op, cur);
  return cur;
}

std::string render_list(const List& xs) {
  std::string s = "[";
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(xs[i]);
  }
  return s + "]";
}

std::optional<List> parse_list(std::string_view s) {
  if (!consume(s, "[")) return std::nullopt;
  List out;
  if (consume(s, "]")) return s.empty() ? std::optional<List>(out) : std::nullopt;
  while (true) {
    if (s.empty() || s[0] < '0' || s[0] > '9') return std::nullopt;
    out.push_back(s[0] - '0');
    s.remove_prefix(1);
    if (consume(s, "]")) break;
    if (!consume(s, ",")) return std::nullopt;
  }
  if (!s.empty()) return std::nullopt;
  return out;
}

std::string render_prompt(const Task& t) {
  std::string desc;
  if (t.ops.empty()) {
    desc = "nothing";
  } else {
    for (std::size_t i = 0; i < t.ops.size(); ++i) desc += (i ? " then " : "") + op_name(t.ops[i]);
  }
  return "do " + desc + " on " + render_list(t.input) + "\n";
}

std::string render_program(const std::vector<Op>& ops) {
  std::string expr = "x";
  for (Op op : ops) expr = op_name(op) + "(" + expr + ")";
  return "f=" + expr;
}

std::string render_answer(const Task& t) {
  return render_program(t.ops) + "\nassert f(" + render_list(t.input) + ") == " +
         render_list(run(t.ops, t.input)) + Tokenizer::kEos;
}

std::optional<Task> parse_prompt(std::string_view s) {
  Task t;
  if (!consume(s, "do ")) return std::nullopt;
  if (consume(s, "nothing")) {
    // identity
  } else {
    while (true) {
      auto op = parse_op(consume_word(s));
      if (!op) return std::nullopt;
      t.ops.push_back(*op);
      if (!consume(s, " then ")) break;
    }
  }
  if (!consume(s, " on ")) return std::nullopt;
  const auto nl = s.find('\n');
  if (nl == std::string_view::npos) return std::nullopt;
  auto lst = parse_list(s.substr(0, nl));
  if (!lst) return std::nullopt;
  t.input = *lst;
  return t;
}

std::optional<std::vector<Op>> parse_program(std::string_view completion) {
  completion = until_eos(completion);
  const auto nl = completion.find('\n');
  std::string_view line = completion.substr(0, nl);
  if (!consume(line, "f=")) return std::nullopt;
  std::vector<Op> outer_first;
  while (!consume(line, "x")) {
    auto op = parse_op(consume_word(line));
    if (!op || !consume(line, "(")) return std::nullopt;
    outer_first.push_back(*op);
    if (outer_first.size() > 16) return std::nullopt;
  }
  for (std::size_t i = 0; i < outer_first.size(); ++i)
    if (!consume(line, ")")) return std::nullopt;
  if (!line.empty()) return std::nullopt;
  return std::vector<Op>(outer_first.rbegin(), outer_first.rend());
}

Example draw(Rng& rng) {
  Task t;
  const int len = uniform_int(rng, 3, 6);
  for (int i = 0; i < len; ++i) t.input.push_back(uniform_int(rng, 0, 9));
  const std::uint64_t r = rng() % 20;
  const int nops = r < 2 ? 0 : (r < 11 ? 1 : 2);
  for (int i = 0; i < nops; ++i) {
    Op op = static_cast<Op>(rng() % op_names().size());
    if (op == Op::Tail && std::find(t.ops.begin(), t.ops.end(), Op::Tail) != t.ops.end())
      op = Op::Rev;
    t.ops.push_back(op);
  }
  return Example{render_prompt(t), render_answer(t), TaskKind::Program};
}

}  // namespace program_task

// ---- generators ---------------------------------------------------------------

namespace {

Example draw(TaskKind kind, Rng& rng) {
  switch (kind) {
    case TaskKind::Math: return math_task::draw(rng);
    case TaskKind::Choice: return choice_task::draw(rng);
    case TaskKind::Program: return program_task::draw(rng);
  }
  throw Error("unknown task kind");
}

std::uint64_t stream_seed(TaskKind kind, std::uint64_t seed, std::uint64_t salt) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(kind), static_cast<std::uint32_t>(salt)};
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

}  // namespace

std::vector<Example> generate(TaskKind kind, std::uint64_t seed, std::size_t n) {
  if (n < 1) throw Error("generator: n must be >= 1");
  Rng rng(stream_seed(kind, seed, 0));
  std::vector<Example> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(draw(kind, rng));
  return out;
}

std::vector<Example> gen_math(std::uint64_t seed, std::size_t n) { return generate(TaskKind::Math, seed, n); }
std::vector<Example> gen_choice(std::uint64_t seed, std::size_t n) { return generate(TaskKind::Choice, seed, n); }
std::vector<Example> gen_program(std::uint64_t seed, std::size_t n) { return generate(TaskKind::Program, seed, n); }

// ---- spans ------------------------------------------------------------------

SpanSet extract_spans(const Example& ex) {
  const std::string_view ans = ex.answer;
  const std::size_t base = ex.prompt.size();
  SpanSet s;
  switch (ex.kind) {
    case TaskKind::Math: {
      const auto p = until_eos(ans).rfind("#### ");
      if (p == std::string_view::npos) throw SpanError("math answer has no '#### ' marker");
      std::size_t i = p + 5;
      if (i < ans.size() && ans[i] == '-') s.positions.push_back(base + i++);
      for (; i < ans.size() && ans[i] >= '0' && ans[i] <= '9'; ++i) s.positions.push_back(base + i);
      if (s.positions.empty() || ans[s.positions.back() - base] == '-')
        throw SpanError("math answer marker is not followed by a numeral");
      break;
    }
    case TaskKind::Choice: {
      const auto p = ans.find("Answer: ");
      if (p == std::string_view::npos || p + 8 >= ans.size() || ans[p + 8] < 'A' || ans[p + 8] > 'D')
        throw SpanError("choice answer has no 'Answer: <A-D>'");
      s.positions.push_back(base + p + 8);
      break;
    }
    case TaskKind::Program: {
      const auto a = ans.find("\nassert f(");
      if (a == std::string_view::npos) throw SpanError("program answer has no assertion line");
      const auto eq = ans.find(") == ", a);
      if (eq == std::string_view::npos) throw SpanError("assertion has no expected output");
      std::size_t i = eq + 5;
      for (; i < ans.size() && ans[i] != Tokenizer::kEos && ans[i] != '\n'; ++i)
        s.positions.push_back(base + i);
      if (s.positions.empty()) throw SpanError("assertion expected output is empty");
      break;
    }
  }
  return s;
}

// ---- scoring ----------------------------------------------------------------

bool eval_correct(TaskKind kind, std::string_view prompt, std::string_view completion) {
  try {
    switch (kind) {
      case TaskKind::Math: {
        auto p = math_task::parse_prompt(prompt);
        auto got = math_task::final_answer(completion);
        return p && got && *got == p->result();
      }
      case TaskKind::Choice: {
        auto q = choice_task::parse_prompt(prompt);
        auto got = choice_task::answer_letter(completion);
        return q && got && *got == choice_task::gold_letter(*q);
      }
      case TaskKind::Program: {
        auto t = program_task::parse_prompt(prompt);
        auto prog = program_task::parse_program(completion);
        return t && prog && program_task::run(*prog, t->input) == program_task::run(t->ops, t->input);
      }
    }
  } catch (const std::exception&) {
    return false;
  }
  return false;
}

// ---- splits -------------------------------------------------------------------

std::string to_string(Split s) {
  switch (s) {
    case Split::Pretrain: return "pretrain";
    case Split::Train: return "train";
    case Split::Calibration: return "calibration";
    case Split::Eval: return "eval";
  }
  return "?";
}

Split split_of(std::string_view prompt) {
  const std::uint64_t h = fnv1a(std::as_bytes(std::span(prompt.data(), prompt.size())));
  const std::uint64_t bucket = (h >> 7) % 20;
  if (bucket < 2) return Split::Eval;
  if (bucket < 4) return Split::Calibration;
  if (bucket < 7) return Split::Train;
  return Split::Pretrain;
}

std::vector<Example> make_split(TaskKind kind, Split split, std::uint64_t seed, std::size_t n) {
  Rng rng(stream_seed(kind, seed, 1 + static_cast<std::uint64_t>(split)));
  std::vector<Example> out;
  out.reserve(n);
  std::unordered_set<std::string> seen;
  const bool dedupe = split != Split::Pretrain;
  std::size_t attempts = 0;
  while (out.size() < n) {
    if (++attempts > 1000 * n + 100000)
      throw Error("split generator exhausted for " + to_string(kind) + "/" + to_string(split));
    Example ex = draw(kind, rng);
    if (split_of(ex.prompt) != split) continue;
    if (dedupe && !seen.insert(ex.prompt).second) continue;
    out.push_back(std::move(ex));
  }
  return out;
}

// ---- dataset files ------------------------------------------------------------

void write_dataset(const std::string& path, const std::vector<Example>& examples) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  for (const auto& ex : examples) {
    nlohmann::json j;
    j["prompt"] = ex.prompt;
    j["answer"] = ex.answer;
    j["kind"] = to_string(ex.kind);
    j["spans"] = extract_spans(ex).positions;
    out << j.dump() << '\n';
  }
}

std::vector<DatasetRecord> read_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path + "' for reading");
  std::vector<DatasetRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    DatasetRecord r;
    r.example.prompt = j.at("prompt").get<std::string>();
    r.example.answer = j.at("answer").get<std::string>();
    r.example.kind = parse_task_kind(j.at("kind").get<std::string>());
    r.spans.positions = j.at("spans").get<std::vector<std::size_t>>();
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace spd
