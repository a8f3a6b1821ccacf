#include "bridge/task.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace bridge::task {

namespace {

int char_token(char c) {
    if (c >= '0' && c <= '9') return c - '0';
    switch (c) {
        case '+': return kPlus;
        case '=': return kEquals;
        case ';': return kSemicolon;
        case '%': return kPercent;
        default: return -1;
    }
}

}  // namespace

std::vector<int> tokenize(const std::string& text) {
    std::vector<int> out;
    out.reserve(text.size());
    for (char c : text) {
        const int id = char_token(c);
        if (id < 0) throw Error(std::string("tokenize: character '") + c + "' not in task alphabet");
        out.push_back(id);
    }
    return out;
}

std::string detokenize(const std::vector<int>& tokens) {
    static const char table[kAlphabetSize] = {'0', '1', '2', '3', '4', '5', '6', '7',
                                              '8', '9', '+', '=', ';', '%', 0,   0};
    std::string out;
    out.reserve(tokens.size());
    for (int t : tokens) {
        if (t < 0 || t >= kAlphabetSize)
            throw Error("detokenize: token id " + std::to_string(t) + " outside task alphabet");
        if (t == kEos || t == kPad) continue;
        out.push_back(table[t]);
    }
    return out;
}

std::string canonicalize(const std::string& s) {
    std::string trimmed;
    trimmed.reserve(s.size());
    for (char c : s)
        if (!std::isspace(static_cast<unsigned char>(c))) trimmed.push_back(c);
    std::size_t i = 0;
    while (i + 1 < trimmed.size() && trimmed[i] == '0') ++i;
    return trimmed.substr(i);
}

std::string extract_final_answer(const std::string& prediction) {
    const auto pos = prediction.rfind('=');
    if (pos == std::string::npos) return prediction;
    return prediction.substr(pos + 1);
}

int verify(const std::string& prediction, const std::string& answer) {
    const std::string got = canonicalize(extract_final_answer(prediction));
    const std::string want = canonicalize(extract_final_answer(answer));
    return (!got.empty() && got == want) ? 1 : 0;
}

void TaskSpec::validate() const {
    if (n_operands_min < 2 || n_operands_max < n_operands_min)
        throw ConfigError("task: operand range must satisfy 2 <= min <= max");
    if (digits_min < 1 || digits_max < digits_min || digits_max > 4)
        throw ConfigError("task: digits range must satisfy 1 <= min <= max <= 4");
    if (sft_train < 1 || rl_train < 1 || test < 1)
        throw ConfigError("task: split sizes must be positive");
}

namespace {

std::uint64_t pow_u64(std::uint64_t b, int e) {
    std::uint64_t r = 1;
    for (int i = 0; i < e; ++i) r *= b;
    return r;
}

// Count of integers whose decimal width lies in [lo, hi]; width 1 includes 0.
std::uint64_t value_count(int lo, int hi) {
    const std::uint64_t upper = pow_u64(10, hi);
    const std::uint64_t lower = lo == 1 ? 0 : pow_u64(10, lo - 1);
    return upper - lower;
}

constexpr int kModulusMin = 2;
constexpr int kModulusMax = 9;

int random_operand(SplitMix64& rng, int digits_min, int digits_max) {
    const int d = digits_min + static_cast<int>(rng.below(static_cast<std::uint64_t>(digits_max - digits_min + 1)));
    const int lo = d == 1 ? 0 : static_cast<int>(pow_u64(10, d - 1));
    const int hi = static_cast<int>(pow_u64(10, d)) - 1;
    return lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
}

struct Problem {
    std::vector<int> operands;
    int modulus = 0;  // 0 for plain chain addition

    std::string prompt() const {
        std::ostringstream os;
        for (std::size_t i = 0; i < operands.size(); ++i) os << (i ? "+" : "") << operands[i];
        if (modulus > 0) os << '%' << modulus;
        os << '=';
        return os.str();
    }

    // Left-fold partial sums, ';'-separated, ending in "=answer".
    std::string trace() const {
        std::ostringstream os;
        long long acc = operands[0];
        for (std::size_t i = 1; i < operands.size(); ++i) {
            os << (i > 1 ? ";" : "") << acc << '+' << operands[i] << '=' << (acc + operands[i]);
            acc += operands[i];
        }
        if (modulus > 0) os << ';' << acc << '%' << modulus << '=' << (acc % modulus);
        return os.str();
    }

    std::string answer() const {
        long long acc = 0;
        for (int v : operands) acc += v;
        if (modulus > 0) acc %= modulus;
        return std::to_string(acc);
    }
};

Problem random_problem(SplitMix64& rng, const TaskSpec& spec) {
    Problem p;
    const int n = spec.n_operands_min +
                  static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.n_operands_max - spec.n_operands_min + 1)));
    p.operands.resize(static_cast<std::size_t>(n));
    for (auto& v : p.operands) v = random_operand(rng, spec.digits_min, spec.digits_max);
    if (spec.family == TaskFamily::ModularAddition)
        p.modulus = kModulusMin + static_cast<int>(rng.below(kModulusMax - kModulusMin + 1));
    return p;
}

}  // namespace

std::uint64_t TaskSpec::prompt_space() const {
    const std::uint64_t values = value_count(digits_min, digits_max);
    std::uint64_t total = 0;
    for (int n = n_operands_min; n <= n_operands_max; ++n) total += pow_u64(values, n);
    if (family == TaskFamily::ModularAddition) total *= kModulusMax - kModulusMin + 1;
    return total;
}

Dataset generate(const TaskSpec& spec) {
    spec.validate();
    const auto total = static_cast<std::uint64_t>(spec.sft_train) + static_cast<std::uint64_t>(spec.rl_train) +
                       static_cast<std::uint64_t>(spec.test);
    const std::uint64_t space = spec.prompt_space();
    if (total > space)
        throw ConfigError("task: requested " + std::to_string(total) + " distinct prompts but the spec admits only " +
                          std::to_string(space));

    SplitMix64 rng(mix64(spec.seed, fnv1a64("task-generate")));
    std::vector<Problem> picked;
    picked.reserve(total);
    std::set<std::string> seen;
    // Rejection-sample distinct prompts; the space check above bounds the loop.
    std::uint64_t attempts = 0;
    const std::uint64_t max_attempts = 1000ULL * total + 100ULL * space;
    while (picked.size() < total) {
        if (++attempts > max_attempts)
            throw Error("task: prompt sampling failed to find " + std::to_string(total) + " distinct prompts");
        Problem p = random_problem(rng, spec);
        if (seen.insert(p.prompt()).second) picked.push_back(std::move(p));
    }

    Dataset ds;
    std::size_t i = 0;
    for (int k = 0; k < spec.sft_train; ++k, ++i) {
        const Problem& p = picked[i];
        ds.sft.push_back({p.prompt(), p.trace(), p.answer()});
    }
    for (int k = 0; k < spec.rl_train; ++k, ++i) {
        const Problem& p = picked[i];
        ds.rl.push_back({p.prompt(), p.answer()});
    }
    for (int k = 0; k < spec.test; ++k, ++i) {
        const Problem& p = picked[i];
        ds.test.push_back({p.prompt(), p.answer()});
    }
    return ds;
}

int max_sequence_length(const Dataset& ds) {
    std::size_t best = 0;
    for (const auto& ex : ds.sft) best = std::max(best, ex.prompt.size() + ex.trace.size() + 1);
    for (const auto& ex : ds.rl) best = std::max(best, ex.prompt.size());
    for (const auto& ex : ds.test) best = std::max(best, ex.prompt.size());
    return static_cast<int>(best);
}

std::string difficulty_key(const std::string& prompt) {
    int operands = 1;
    int max_digits = 0;
    int run = 0;
    for (char c : prompt) {
        if (c >= '0' && c <= '9') {
            ++run;
        } else {
            max_digits = std::max(max_digits, run);
            run = 0;
            if (c == '+') ++operands;
            if (c == '%') break;  // the modulus does not count as an operand
        }
    }
    max_digits = std::max(max_digits, run);
    return "n" + std::to_string(operands) + "d" + std::to_string(max_digits);
}

std::string family_name(TaskFamily f) {
    return f == TaskFamily::ChainAddition ? "chain-addition" : "modular-addition";
}

std::optional<TaskFamily> family_from_name(const std::string& name) {
    if (name == "chain-addition") return TaskFamily::ChainAddition;
    if (name == "modular-addition") return TaskFamily::ModularAddition;
    return std::nullopt;
}

namespace {

void write_lines(const std::string& path, const std::vector<nlohmann::json>& rows) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open for writing: " + path);
    for (const auto& row : rows) out << row.dump() << '\n';
}

std::vector<nlohmann::json> read_lines(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open for reading: " + path);
    std::vector<nlohmann::json> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        rows.push_back(nlohmann::json::parse(line));
    }
    return rows;
}

}  // namespace

void write_sft_file(const std::string& path, const std::vector<SftExample>& rows) {
    std::vector<nlohmann::json> js;
    js.reserve(rows.size());
    for (const auto& r : rows) js.push_back({{"prompt", r.prompt}, {"trace", r.trace}, {"answer", r.answer}});
    write_lines(path, js);
}

void write_rl_file(const std::string& path, const std::vector<RlExample>& rows) {
    std::vector<nlohmann::json> js;
    js.reserve(rows.size());
    for (const auto& r : rows) js.push_back({{"prompt", r.prompt}, {"answer", r.answer}});
    write_lines(path, js);
}

std::vector<SftExample> read_sft_file(const std::string& path) {
    std::vector<SftExample> rows;
    for (const auto& j : read_lines(path))
        rows.push_back({j.at("prompt").get<std::string>(), j.at("trace").get<std::string>(),
                        j.at("answer").get<std::string>()});
    return rows;
}

std::vector<RlExample> read_rl_file(const std::string& path) {
    std::vector<RlExample> rows;
    for (const auto& j : read_lines(path))
        rows.push_back({j.at("prompt").get<std::string>(), j.at("answer").get<std::string>()});
    return rows;
}

}  // namespace bridge::task
