#pragma once

// Synthetic verifiable arithmetic tasks: dataset generation with expert
// step-by-step traces, a fixed character tokenizer, and the binary verifier.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "bridge/common.hpp"

namespace bridge::task {

// Fixed token table. Model vocab sizes must be at least kAlphabetSize.
inline constexpr int kPlus = 10;
inline constexpr int kEquals = 11;
inline constexpr int kSemicolon = 12;
inline constexpr int kPercent = 13;
inline constexpr int kEos = 14;
inline constexpr int kPad = 15;
inline constexpr int kAlphabetSize = 16;

std::vector<int> tokenize(const std::string& text);
/// Inverse of tokenize on task text; end/pad tokens render as nothing.
std::string detokenize(const std::vector<int>& tokens);

/// Strips whitespace and leading zeros (a lone "0" survives).
std::string canonicalize(const std::string& s);
/// Substring after the last '=' when present, else the whole string.
std::string extract_final_answer(const std::string& prediction);
/// Binary rule-based reward: 1 iff the extracted final answer matches.
int verify(const std::string& prediction, const std::string& answer);

struct SftExample {
    std::string prompt;
    std::string trace;
    std::string answer;
};

struct RlExample {
    std::string prompt;
    std::string answer;
};

enum class TaskFamily { ChainAddition, ModularAddition };

struct TaskSpec {
    TaskFamily family = TaskFamily::ChainAddition;
    int n_operands_min = 2;
    int n_operands_max = 4;
    int digits_min = 1;
    int digits_max = 2;
    std::uint64_t seed = 0;
    int sft_train = 512;
    int rl_train = 512;
    int test = 128;

    void validate() const;
    /// Number of distinct prompts this spec can produce.
    std::uint64_t prompt_space() const;
};

struct Dataset {
    std::vector<SftExample> sft;
    std::vector<RlExample> rl;
    std::vector<RlExample> test;
};

/// Deterministic generation; the three splits are disjoint by prompt.
Dataset generate(const TaskSpec& spec);

/// Longest tokenized prompt+trace+end sequence in the dataset.
int max_sequence_length(const Dataset& ds);

/// Difficulty bucket for evaluation breakdowns, e.g. "n3d2".
std::string difficulty_key(const std::string& prompt);

std::string family_name(TaskFamily f);
std::optional<TaskFamily> family_from_name(const std::string& name);

// One record per line: {"prompt": ..., "trace": ..., "answer": ...}.
void write_sft_file(const std::string& path, const std::vector<SftExample>& rows);
void write_rl_file(const std::string& path, const std::vector<RlExample>& rows);
std::vector<SftExample> read_sft_file(const std::string& path);
std::vector<RlExample> read_rl_file(const std::string& path);

}  // namespace bridge::task
