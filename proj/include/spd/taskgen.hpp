#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "spd/model.hpp"

namespace spd {

class TokenizeError : public Error {
 public:
  using Error::Error;
};

class SpanError : public Error {
 public:
  using Error::Error;
};

// Fixed character-level vocabulary. One token per character; the alphabet is
// small enough that span positions are exact character offsets.
class Tokenizer {
 public:
  static constexpr char kEos = '$';
  static const std::string& alphabet();

  static int vocab_size();
  static TokenId id(char c);  // throws TokenizeError for characters outside the alphabet
  static char ch(TokenId id);
  static TokenSeq encode(std::string_view s);
  static std::string decode(std::span<const TokenId> ids);
  static TokenId eos() { return id(kEos); }
  static bool covers(std::string_view s);
};

enum class TaskKind { Math, Choice, Program };
std::string to_string(TaskKind k);
TaskKind parse_task_kind(const std::string& s);
std::vector<TaskKind> all_task_kinds();

struct Example {
  std::string prompt;
  std::string answer;  // ends with the end-of-answer sentinel
  TaskKind kind = TaskKind::Math;

  std::string text() const { return prompt + answer; }
  TokenSeq tokens() const { return Tokenizer::encode(text()); }
  friend bool operator==(const Example&, const Example&) = default;
};

// Sorted token positions (0-based, into prompt+answer) whose prediction decides
// correctness.
struct SpanSet {
  std::vector<std::size_t> positions;
  bool empty() const { return positions.empty(); }
  std::size_t size() const { return positions.size(); }
  friend bool operator==(const SpanSet&, const SpanSet&) = default;
};

// Generators: pure functions of (seed, n).
std::vector<Example> gen_math(std::uint64_t seed, std::size_t n);
std::vector<Example> gen_choice(std::uint64_t seed, std::size_t n);
std::vector<Example> gen_program(std::uint64_t seed, std::size_t n);
std::vector<Example> generate(TaskKind kind, std::uint64_t seed, std::size_t n);

// Span rules: math = digits after the final "#### "; choice = the letter after
// "Answer: "; program = the expected-output list of the assertion line.
SpanSet extract_spans(const Example& ex);

// Exact-match scoring. Never throws: anything unparseable is incorrect.
bool eval_correct(TaskKind kind, std::string_view prompt, std::string_view completion);

// ---- task internals exposed for tests and tooling ----------------------------

namespace math_task {
struct Problem {
  std::string name, object;
  int start = 0;
  std::vector<int> deltas;  // signed steps applied in order
  int result() const;
};
std::string render_prompt(const Problem& p);
std::string render_answer(const Problem& p);
std::optional<Problem> parse_prompt(std::string_view prompt);
// Integer after the last "#### " marker, if any.
std::optional<long long> final_answer(std::string_view text);
}  // namespace math_task

namespace choice_task {
enum class Attribute { Color, Home };
struct Question {
  std::string creature;
  Attribute attribute = Attribute::Color;
  std::vector<std::string> options;  // four, in display order
};
// The fixed synthetic fact table.
const std::vector<std::string>& creatures();
std::string fact(const std::string& creature, Attribute attr);
std::string render_prompt(const Question& q);
char gold_letter(const Question& q);
std::optional<Question> parse_prompt(std::string_view prompt);
std::optional<char> answer_letter(std::string_view completion);
}  // namespace choice_task

namespace program_task {
enum class Op { Rev, Sort, Inc, Dec, Tail };
const std::vector<std::string>& op_names();
std::optional<Op> parse_op(std::string_view name);
std::string op_name(Op op);

using List = std::vector<int>;
struct Task {
  std::vector<Op> ops;  // applied left to right; empty = identity
  List input;
};
List apply(Op op, const List& xs);
List run(const std::vector<Op>& ops, const List& xs);
std::string render_list(const List& xs);
std::optional<List> parse_list(std::string_view s);
std::string render_prompt(const Task& t);
std::string render_program(const std::vector<Op>& ops);  // "f=inc(rev(x))"
std::string render_answer(const Task& t);
std::optional<Task> parse_prompt(std::string_view prompt);
// Parses the "f=..." line at the start of a completion.
std::optional<std::vector<Op>> parse_program(std::string_view completion);
}  // namespace program_task

// ---- splits and dataset files -----------------------------------------------

enum class Split { Pretrain, Train, Calibration, Eval };
std::string to_string(Split s);

// Examples for one split. Splits are disjoint by construction: every prompt is
// assigned to exactly one split by a hash of its text, and each split draws
// from its own generator stream, so sizes of one split never affect another.
std::vector<Example> make_split(TaskKind kind, Split split, std::uint64_t seed, std::size_t n);
Split split_of(std::string_view prompt);

struct DatasetRecord {
  Example example;
  SpanSet spans;
};

// Line-delimited JSON: {"prompt","answer","kind","spans"}.
void write_dataset(const std::string& path, const std::vector<Example>& examples);
std::vector<DatasetRecord> read_dataset(const std::string& path);

}  // namespace spd
