#include <algorithm>
#include <fstream>
#include <map>
#include <random>
#include <regex>
#include <set>

#include "doctest.h"
#include "spd/taskgen.hpp"
#include "support.hpp"

using namespace spd;

namespace oracle {

// Independent arithmetic: re-derives the result from the prompt text alone.
std::optional<long long> math_result(const std::string& prompt) {
  static const std::regex head(R"(^[a-z]+ has (\d+) [a-z]+((, (gets|loses) \d+)+)\. how many\?\n$)");
  std::smatch m;
  if (!std::regex_match(prompt, m, head)) return std::nullopt;
  long long v = std::stoll(m[1]);
  const std::string steps = m[2];
  static const std::regex step(R"((gets|loses) (\d+))");
  for (std::sregex_iterator it(steps.begin(), steps.end(), step), end; it != end; ++it)
    v += ((*it)[1] == "gets" ? 1 : -1) * std::stoll((*it)[2]);
  return v;
}

using List = std::vector<int>;

List run_op(const std::string& op, List xs) {
  if (op == "rev") std::reverse(xs.begin(), xs.end());
  else if (op == "sort") std::sort(xs.begin(), xs.end());
  else if (op == "inc") for (int& x : xs) x = (x + 1) % 10;
  else if (op == "dec") for (int& x : xs) x = (x + 9) % 10;
  else if (op == "tail") { if (!xs.empty()) xs.erase(xs.begin()); }
  else throw std::runtime_error("bad op " + op);
  return xs;
}

List parse_list(const std::string& s) {
  List out;
  for (char c : s)
    if (c >= '0' && c <= '9') out.push_back(c - '0');
  return out;
}

std::string render(const List& xs) {
  std::string s = "[";
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + std::to_string(xs[i]);
  return s + "]";
}

struct ProgPrompt {
  std::vector<std::string> ops;
  List input;
};

std::optional<ProgPrompt> program_prompt(const std::string& p) {
  static const std::regex re(R"(^do (.+) on (\[[0-9,]*\])\n$)");
  std::smatch m;
  if (!std::regex_match(p, m, re)) return std::nullopt;
  ProgPrompt out;
  out.input = parse_list(m[2]);
  const std::string desc = m[1];
  if (desc != "nothing") {
    std::size_t pos = 0;
    while (true) {
      const auto nx = desc.find(" then ", pos);
      out.ops.push_back(desc.substr(pos, nx - pos));
      if (nx == std::string::npos) break;
      pos = nx + 6;
    }
  }
  return out;
}

// f=a(b(x)) -> {b, a}
std::optional<std::vector<std::string>> program_ops(const std::string& line) {
  static const std::regex re(R"(^f=((?:[a-z]+\()*)x(\)*)$)");
  std::smatch m;
  if (!std::regex_match(line, m, re)) return std::nullopt;
  std::vector<std::string> outer;
  const std::string calls = m[1];
  std::size_t pos = 0;
  while (pos < calls.size()) {
    const auto paren = calls.find('(', pos);
    outer.push_back(calls.substr(pos, paren - pos));
    pos = paren + 1;
  }
  if (m[2].length() != static_cast<long>(outer.size())) return std::nullopt;
  for (const auto& o : outer)
    if (o != "rev" && o != "sort" && o != "inc" && o != "dec" && o != "tail") return std::nullopt;
  std::reverse(outer.begin(), outer.end());
  return outer;
}

// Second, independently written scorer.
bool correct(TaskKind kind, const std::string& prompt, std::string completion) {
  if (auto e = completion.find('$'); e != std::string::npos) completion.resize(e);
  if (kind == TaskKind::Math) {
    const auto gold = math_result(prompt);
    const auto p = completion.rfind("#### ");
    if (!gold || p == std::string::npos) return false;
    static const std::regex num(R"(^(-?)(\d{1,12}))");
    std::smatch m;
    const std::string rest = completion.substr(p + 5);
    if (!std::regex_search(rest, m, num)) return false;
    const long long v = std::stoll(m[2]) * (m[1].length() ? -1 : 1);
    return v == *gold;
  }
  if (kind == TaskKind::Choice) {
    static const std::regex re(R"(Q: (what color is|where does) a ([a-z]+)(?: live)?\?\n)");
    std::smatch m;
    if (!std::regex_search(prompt, m, re)) return false;
    const auto p = completion.find("Answer: ");
    if (p == std::string::npos || p + 8 >= completion.size()) return false;
    const char got = completion[p + 8];
    // locate the gold option through the public fact table
    const auto attr = m[1] == "what color is" ? choice_task::Attribute::Color : choice_task::Attribute::Home;
    const std::string truth = choice_task::fact(m[2], attr);
    for (char letter : {'A', 'B', 'C', 'D'}) {
      const std::string line = std::string(1, letter) + ". " + truth + "\n";
      if (prompt.find(line) != std::string::npos) return got == letter;
    }
    return false;
  }
  const auto pp = program_prompt(prompt);
  if (!pp) return false;
  const auto ops = program_ops(completion.substr(0, completion.find('\n')));
  if (!ops) return false;
  List a = pp->input, b = pp->input;
  for (const auto& o : *ops) a = run_op(o, a);
  for (const auto& o : pp->ops) b = run_op(o, b);
  return a == b;
}

}  // namespace oracle

TEST_CASE("tokenizer round-trips the alphabet and rejects foreign characters") {
  CHECK(Tokenizer::vocab_size() <= 64);
  const std::string a = Tokenizer::alphabet();
  CHECK(Tokenizer::decode(Tokenizer::encode(a)) == a);
  for (TaskKind k : all_task_kinds())
    for (const auto& e : generate(k, 3, 200)) {
      CHECK(Tokenizer::covers(e.text()));
      CHECK(Tokenizer::decode(e.tokens()) == e.text());
      CHECK(e.tokens().size() <= 128u);
    }
  CHECK_THROWS_AS(Tokenizer::encode("Zebra"), TokenizeError);
}

TEST_CASE("generators are pure functions of (seed, n)") {
  for (TaskKind k : all_task_kinds()) {
    CHECK(generate(k, 5, 50) == generate(k, 5, 50));
    const auto big = generate(k, 5, 60);
    CHECK(std::equal(big.begin(), big.begin() + 50, generate(k, 5, 50).begin()));
    CHECK_FALSE(generate(k, 5, 50) == generate(k, 6, 50));
  }
}

TEST_CASE("math: span size 1-3 and arithmetic self-consistency") {
  for (const auto& e : gen_math(11, 1000)) {
    const auto s = extract_spans(e);
    CHECK(s.size() >= 1);
    CHECK(s.size() <= 3);
    const auto gold = oracle::math_result(e.prompt);
    REQUIRE(gold);
    const auto marker = e.answer.rfind("#### ");
    CHECK(std::stoll(e.answer.substr(marker + 5)) == *gold);
    // every worked line is correct arithmetic
    static const std::regex line(R"((\d+)([+-])(\d+)=(\d+)\n)");
    for (std::sregex_iterator it(e.answer.begin(), e.answer.end(), line), end; it != end; ++it) {
      const long long a = std::stoll((*it)[1]), b = std::stoll((*it)[3]), c = std::stoll((*it)[4]);
      CHECK(((*it)[2] == "+" ? a + b : a - b) == c);
    }
  }
}

TEST_CASE("math: spans sit on the digits after the marker") {
  const Example e{"bo has 40 pens, gets 2. how many?\n", "40+2=42\n#### 42$", TaskKind::Math};
  const auto s = extract_spans(e);
  REQUIRE(s.size() == 2);
  CHECK(e.text()[s.positions[0]] == '4');
  CHECK(e.text()[s.positions[1]] == '2');
  CHECK(s.positions[0] == e.text().rfind("#### ") + 5);
  CHECK_THROWS_AS(extract_spans(Example{"q\n", "no marker$", TaskKind::Math}), SpanError);
}

TEST_CASE("choice: one span position, found by brute scan too") {
  for (const auto& e : gen_choice(12, 1000)) {
    const auto s = extract_spans(e);
    REQUIRE(s.size() == 1);
    const std::string text = e.text();
    std::size_t scanned = std::string::npos;
    for (std::size_t i = e.prompt.size(); i + 8 < text.size(); ++i)
      if (text.compare(i, 8, "Answer: ") == 0) scanned = i + 8;
    CHECK(s.positions[0] == scanned);
    CHECK(s.positions[0] >= e.prompt.size());
  }
}

TEST_CASE("choice: permuting options relabels the gold letter") {
  for (const auto& e : gen_choice(13, 100)) {
    auto q = choice_task::parse_prompt(e.prompt);
    REQUIRE(q);
    const std::string truth = q->options[choice_task::gold_letter(*q) - 'A'];
    std::mt19937_64 rng(1);
    std::shuffle(q->options.begin(), q->options.end(), rng);
    const char letter = choice_task::gold_letter(*q);
    CHECK(q->options[letter - 'A'] == truth);
    CHECK(eval_correct(TaskKind::Choice, choice_task::render_prompt(*q),
                       std::string("Answer: ") + letter + "$"));
  }
}

TEST_CASE("program: span 5-20 and the independent interpreter agrees") {
  bool saw_identity = false;
  for (const auto& e : gen_program(14, 1000)) {
    const auto s = extract_spans(e);
    CHECK(s.size() >= 5);
    CHECK(s.size() <= 20);
    const std::string text = e.text();
    const auto eq = text.find(") == ");
    const auto end = text.find('$', eq);
    CHECK(s.positions.front() == eq + 5);
    CHECK(s.positions.back() == end - 1);
    CHECK(s.size() == end - eq - 5);

    const auto pp = oracle::program_prompt(e.prompt);
    REQUIRE(pp);
    oracle::List out = pp->input;
    for (const auto& o : pp->ops) out = oracle::run_op(o, out);
    CHECK(text.substr(eq + 5, end - eq - 5) == oracle::render(out));
    if (pp->ops.empty()) {
      saw_identity = true;
      CHECK(out == pp->input);
    }
  }
  CHECK(saw_identity);
}

TEST_CASE("every calibration span lies inside the answer region") {
  for (TaskKind k : all_task_kinds())
    for (const auto& e : make_split(k, Split::Calibration, 42, 200)) {
      const auto s = extract_spans(e);
      CHECK_FALSE(s.empty());
      CHECK(std::is_sorted(s.positions.begin(), s.positions.end()));
      for (auto p : s.positions) {
        CHECK(p >= e.prompt.size());
        CHECK(p < e.text().size());
      }
    }
}

TEST_CASE("eval_correct: gold true, empty false, never throws") {
  for (TaskKind k : all_task_kinds())
    for (const auto& e : generate(k, 15, 100)) {
      CHECK(eval_correct(k, e.prompt, e.answer));
      CHECK_FALSE(eval_correct(k, e.prompt, ""));
      CHECK_NOTHROW(eval_correct(k, e.prompt, "#### 99999999999999999999999 ((((f=x"));
      CHECK_FALSE(eval_correct(k, "garbage", e.answer));
    }
}

TEST_CASE("eval_correct agrees with an independent matcher on random completions") {
  std::mt19937_64 rng(16);
  const std::string alpha = Tokenizer::alphabet();
  std::uniform_int_distribution<std::size_t> pick(0, alpha.size() - 1);
  int agree = 0, total = 0, positives = 0;
  for (TaskKind k : all_task_kinds()) {
    const auto exs = generate(k, 17, 200);
    for (std::size_t i = 0; i < exs.size(); ++i) {
      std::string c = exs[i].answer;
      switch (i % 5) {
        case 0: break;
        case 1: c[rng() % c.size()] = alpha[pick(rng)]; break;
        case 2: c = exs[(i + 1) % exs.size()].answer; break;
        case 3: c.insert(rng() % c.size(), 1, alpha[pick(rng)]); break;
        case 4: c = c.substr(0, rng() % c.size()); break;
      }
      const bool a = eval_correct(k, exs[i].prompt, c);
      const bool b = oracle::correct(k, exs[i].prompt, c);
      INFO(to_string(k) << " completion: " << c);
      CHECK(a == b);
      agree += a == b;
      positives += a;
      ++total;
    }
  }
  CHECK(agree == total);
  CHECK(positives > total / 5);
  CHECK(positives < total);
}

TEST_CASE("program scoring runs the completion's program, not its assertion text") {
  const std::string prompt = "do rev then rev on [1,2,3]\n";
  CHECK(eval_correct(TaskKind::Program, prompt, "f=x\nassert f([1,2,3]) == [9]$"));
  CHECK(eval_correct(TaskKind::Program, prompt, "f=sort(x)$"));
  CHECK_FALSE(eval_correct(TaskKind::Program, prompt, "f=rev(x)\nassert f([1,2,3]) == [1,2,3]$"));
  CHECK_FALSE(eval_correct(TaskKind::Program, prompt, "f=rev(x))$"));
}

TEST_CASE("splits are disjoint, deduplicated and independent of each other's sizes") {
  for (TaskKind k : all_task_kinds()) {
    std::map<std::string, Split> seen;
    for (Split s : {Split::Train, Split::Calibration, Split::Eval}) {
      const auto exs = make_split(k, s, 42, 150);
      CHECK(exs.size() == 150);
      std::set<std::string> uniq;
      for (const auto& e : exs) {
        CHECK(split_of(e.prompt) == s);
        uniq.insert(e.prompt);
        auto [it, fresh] = seen.emplace(e.prompt, s);
        CHECK((fresh || it->second == s));
      }
      CHECK(uniq.size() == exs.size());
    }
    const auto small = make_split(k, Split::Eval, 42, 20);
    const auto large = make_split(k, Split::Eval, 42, 80);
    CHECK(std::equal(small.begin(), small.end(), large.begin()));
  }
}

TEST_CASE("dataset files round-trip with spans") {
  const auto dir = ts::temp_dir("taskgen");
  const auto exs = make_split(TaskKind::Program, Split::Train, 3, 25);
  const std::string path = (dir / "d.jsonl").string();
  write_dataset(path, exs);
  const auto back = read_dataset(path);
  REQUIRE(back.size() == exs.size());
  for (std::size_t i = 0; i < exs.size(); ++i) {
    CHECK(back[i].example == exs[i]);
    CHECK(back[i].spans == extract_spans(exs[i]));
  }
}
