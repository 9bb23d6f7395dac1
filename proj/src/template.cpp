#include "edgeflow/template.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "edgeflow/kvfile.hpp"

namespace edgeflow {

namespace kv {

std::string trim(std::string_view s) {
  size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) b++;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) e--;
  return std::string(s.substr(b, e - b));
}

std::vector<Line> parse_lines(std::string_view content) {
  std::vector<Line> out;
  int number = 0;
  size_t pos = 0;
  while (pos <= content.size()) {
    size_t nl = content.find('\n', pos);
    std::string_view raw = content.substr(
        pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    number++;
    pos = (nl == std::string_view::npos) ? content.size() + 1 : nl + 1;

    std::string line = trim(raw);
    if (line.empty() || line[0] == '#') continue;
    size_t colon = line.find(':');
    if (colon == std::string::npos)
      throw Error(Err::Syntax, number, "expected 'key: value'");
    std::string key = trim(line.substr(0, colon));
    std::string value = trim(line.substr(colon + 1));
    if (key.empty()) throw Error(Err::Syntax, number, "empty key");
    if (value.empty())
      throw Error(Err::Syntax, number, "empty value for '" + key + "'");
    out.push_back(Line{number, std::move(key), std::move(value)});
  }
  return out;
}

}  // namespace kv

bool valid_name_token(const std::string& s) {
  if (s.empty()) return false;
  if (s[0] < 'a' || s[0] > 'z') return false;
  for (char c : s) {
    bool ok = (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_' ||
              c == '-';
    if (!ok) return false;
  }
  return true;
}

StorageRef parse_storage_ref(const std::string& text) {
  size_t sep = text.find("://");
  if (sep == std::string::npos)
    throw Error(Err::InvalidRef, "missing '://' in '" + text + "'");
  StorageRef ref{text.substr(0, sep), text.substr(sep + 3)};
  if (!valid_name_token(ref.backend))
    throw Error(Err::InvalidRef, "bad backend name in '" + text + "'");
  if (ref.key.empty())
    throw Error(Err::InvalidRef, "empty key in '" + text + "'");
  for (char c : ref.key)
    if (std::isspace(static_cast<unsigned char>(c)))
      throw Error(Err::InvalidRef, "whitespace in key of '" + text + "'");
  return ref;
}

static constexpr int64_t kCronMinMs = 1000;
static constexpr int64_t kCronMaxMs = 86'400'000;

int64_t parse_cron_period(const std::string& text) {
  if (text.size() < 2)
    throw Error(Err::InvalidCron, "bad period '" + text + "'");
  char unit = text.back();
  int64_t scale;
  switch (unit) {
    case 's': scale = 1000; break;
    case 'm': scale = 60'000; break;
    case 'h': scale = 3'600'000; break;
    default:
      throw Error(Err::InvalidCron, "bad unit in '" + text + "'");
  }
  std::string digits = text.substr(0, text.size() - 1);
  if (digits.empty() ||
      !std::all_of(digits.begin(), digits.end(),
                   [](char c) { return c >= '0' && c <= '9'; }))
    throw Error(Err::InvalidCron, "bad period '" + text + "'");
  if (digits.size() > 9)
    throw Error(Err::InvalidCron, "period out of range: '" + text + "'");
  int64_t ms = std::stoll(digits) * scale;
  if (ms < kCronMinMs || ms > kCronMaxMs)
    throw Error(Err::InvalidCron, "period out of range: '" + text + "'");
  return ms;
}

std::string render_cron_period(int64_t period_ms) {
  if (period_ms % 3'600'000 == 0) return std::to_string(period_ms / 3'600'000) + "h";
  if (period_ms % 60'000 == 0) return std::to_string(period_ms / 60'000) + "m";
  return std::to_string(period_ms / 1000) + "s";
}

namespace {

// Classifies a key into its family plus index. "input" is index 1 of the
// input family; "input1" is rejected so a file cannot spell index 1 twice.
struct KeyInfo {
  enum Family { Scalar, Input, Output, NextFunction, NextTier } family;
  std::string scalar;  // for Family::Scalar
  int index = 0;       // 0 = unindexed
};

bool split_indexed(const std::string& key, const std::string& stem, int& index,
                   bool& bare) {
  if (key.compare(0, stem.size(), stem) != 0) return false;
  std::string suffix = key.substr(stem.size());
  if (suffix.empty()) {
    bare = true;
    index = 0;
    return true;
  }
  if (!std::all_of(suffix.begin(), suffix.end(),
                   [](char c) { return c >= '0' && c <= '9'; }))
    return false;
  if (suffix.size() > 4) throw Error(Err::IndexMismatch, "index too large: " + key);
  bare = false;
  index = std::stoi(suffix);
  return true;
}

KeyInfo classify_key(const std::string& key, int line) {
  static const std::set<std::string> scalars = {"name", "tier",  "handler",
                                               "sync", "cron", "cron_burst"};
  if (scalars.count(key)) return {KeyInfo::Scalar, key, 0};
  int index;
  bool bare;
  if (split_indexed(key, "next_function", index, bare)) {
    if (!bare && index < 1)
      throw Error(Err::IndexMismatch, line, "next_function index must start at 1");
    return {KeyInfo::NextFunction, "", bare ? 0 : index};
  }
  if (split_indexed(key, "next_tier", index, bare)) {
    if (!bare && index < 1)
      throw Error(Err::IndexMismatch, line, "next_tier index must start at 1");
    return {KeyInfo::NextTier, "", bare ? 0 : index};
  }
  if (split_indexed(key, "input", index, bare)) {
    if (bare) return {KeyInfo::Input, "", 1};
    if (index < 2)
      throw Error(Err::IndexMismatch, line,
                  "'" + key + "' is not allowed; the first input is 'input'");
    return {KeyInfo::Input, "", index};
  }
  if (split_indexed(key, "output", index, bare)) {
    if (!bare && index < 1)
      throw Error(Err::IndexMismatch, line, "output index must start at 1");
    return {KeyInfo::Output, "", bare ? 0 : index};
  }
  throw Error(Err::UnknownKey, line, "unknown key '" + key + "'");
}

struct IndexedValue {
  int line;
  std::string value;
};

}  // namespace

FunctionTemplate parse_template(const std::string& content) {
  auto lines = kv::parse_lines(content);

  std::map<std::string, kv::Line> scalars;
  std::map<int, IndexedValue> inputs, outputs, next_fns, next_tiers;
  bool outputs_bare = false, next_fn_bare = false, next_tier_bare = false;
  std::set<std::string> seen;

  for (auto& ln : lines) {
    if (!seen.insert(ln.key).second)
      throw Error(Err::DuplicateKey, ln.number, "duplicate key '" + ln.key + "'");
    KeyInfo info = classify_key(ln.key, ln.number);
    IndexedValue iv{ln.number, ln.value};
    switch (info.family) {
      case KeyInfo::Scalar:
        scalars.emplace(info.scalar, ln);
        break;
      case KeyInfo::Input:
        inputs.emplace(info.index, iv);
        break;
      case KeyInfo::Output:
        if (info.index == 0) outputs_bare = true;
        outputs.emplace(info.index, iv);
        break;
      case KeyInfo::NextFunction:
        if (info.index == 0) next_fn_bare = true;
        next_fns.emplace(info.index, iv);
        break;
      case KeyInfo::NextTier:
        if (info.index == 0) next_tier_bare = true;
        next_tiers.emplace(info.index, iv);
        break;
    }
  }

  FunctionTemplate t;

  auto require = [&](const char* key) -> kv::Line& {
    auto it = scalars.find(key);
    if (it == scalars.end())
      throw Error(Err::MissingKey, std::string("missing required key '") + key + "'");
    return it->second;
  };

  {
    kv::Line& ln = require("name");
    if (!valid_name_token(ln.value))
      throw Error(Err::Syntax, ln.number, "bad function name '" + ln.value + "'");
    t.name = ln.value;
  }
  {
    kv::Line& ln = require("tier");
    if (!valid_name_token(ln.value))
      throw Error(Err::Syntax, ln.number, "bad tier name '" + ln.value + "'");
    t.tier = ln.value;
  }
  {
    kv::Line& ln = require("handler");
    for (char c : ln.value)
      if (std::isspace(static_cast<unsigned char>(c)))
        throw Error(Err::Syntax, ln.number, "whitespace in handler id");
    t.handler = ln.value;
  }
  {
    kv::Line& ln = require("sync");
    if (ln.value == "sync") t.sync = SyncMode::Sync;
    else if (ln.value == "async") t.sync = SyncMode::Async;
    else
      throw Error(Err::Syntax, ln.number,
                  "sync must be 'sync' or 'async', got '" + ln.value + "'");
  }

  if (auto it = scalars.find("cron"); it != scalars.end()) {
    CronSpec cron;
    cron.period_ms = parse_cron_period(it->second.value);
    if (auto bit = scalars.find("cron_burst"); bit != scalars.end()) {
      const std::string& v = bit->second.value;
      if (!std::all_of(v.begin(), v.end(),
                       [](char c) { return c >= '0' && c <= '9'; }) ||
          v.empty() || v.size() > 7)
        throw Error(Err::InvalidCron, bit->second.number,
                    "bad cron_burst '" + v + "'");
      cron.burst = std::stoi(v);
      if (cron.burst < 1)
        throw Error(Err::InvalidCron, bit->second.number, "cron_burst must be >= 1");
    }
    t.cron = cron;
  } else if (scalars.count("cron_burst")) {
    throw Error(Err::InvalidCron, scalars.at("cron_burst").number,
                "cron_burst without cron");
  }

  {
    // Contiguity: bare "input" is index 1, extras are input2..N.
    int expect = 1;
    for (const auto& [idx, iv] : inputs) {
      if (idx != expect)
        throw Error(Err::IndexMismatch, iv.line,
                    "input indices are not contiguous (expected input" +
                        std::to_string(expect) + ")");
      expect++;
      t.inputs.push_back(parse_storage_ref(iv.value));
    }
  }

  if (!outputs.empty()) {
    if (outputs_bare && outputs.size() > 1)
      throw Error(Err::IndexMismatch, outputs.begin()->second.line,
                  "both plain and indexed 'output' present");
    t.indexed_outputs = !outputs_bare;
    int expect = 1;
    std::set<std::string> names;
    for (const auto& [idx, iv] : outputs) {
      if (!outputs_bare && idx != expect)
        throw Error(Err::IndexMismatch, iv.line,
                    "output indices are not contiguous from 1");
      expect = idx + 1;
      OutputSpec spec;
      spec.ref = parse_storage_ref(iv.value);
      spec.data_name = spec.ref.key;
      if (!names.insert(spec.data_name).second)
        throw Error(Err::InvalidRef, iv.line,
                    "duplicate output data name '" + spec.data_name + "'");
      t.outputs.push_back(std::move(spec));
    }
  }

  // next_function / next_tier must use the same indexing and the same set of
  // indices; a function without a tier (or the reverse) is a mismatch.
  if (next_fns.size() != next_tiers.size() || next_fn_bare != next_tier_bare)
    throw Error(Err::IndexMismatch,
                next_fns.empty() ? (next_tiers.empty() ? 0 : next_tiers.begin()->second.line)
                                 : next_fns.begin()->second.line,
                "next_function and next_tier entries do not align");
  if (next_fn_bare && next_fns.size() > 1)
    throw Error(Err::IndexMismatch, next_fns.begin()->second.line,
                "both plain and indexed 'next_function' present");
  if (next_tier_bare && next_tiers.size() > 1)
    throw Error(Err::IndexMismatch, next_tiers.begin()->second.line,
                "both plain and indexed 'next_tier' present");

  if (!next_fns.empty()) {
    int expect = next_fn_bare ? 0 : 1;
    for (auto fit = next_fns.begin(), tit = next_tiers.begin();
         fit != next_fns.end(); ++fit, ++tit) {
      if (fit->first != tit->first)
        throw Error(Err::IndexMismatch, fit->second.line,
                    "next_function and next_tier indices do not align");
      if (fit->first != expect)
        throw Error(Err::IndexMismatch, fit->second.line,
                    "next indices are not contiguous from 1");
      expect++;
      NextSpec spec;
      if (!valid_name_token(fit->second.value))
        throw Error(Err::Syntax, fit->second.line,
                    "bad successor name '" + fit->second.value + "'");
      if (!valid_name_token(tit->second.value))
        throw Error(Err::Syntax, tit->second.line,
                    "bad tier name '" + tit->second.value + "'");
      spec.function = fit->second.value;
      spec.tier = tit->second.value;

      int branch;
      if (next_fn_bare) {
        branch = 0;
      } else if (t.indexed_outputs) {
        branch = fit->first;
        if (branch > static_cast<int>(t.outputs.size()))
          throw Error(Err::IndexMismatch, fit->second.line,
                      "next_function" + std::to_string(branch) +
                          " has no matching output" + std::to_string(branch));
      } else {
        // Indexed successors against a single (or absent) output: the
        // one-to-many form. All successors share the unindexed branch.
        branch = 0;
      }
      t.nexts.emplace_back(branch, std::move(spec));
    }
  }
  if (next_fn_bare && !next_fns.empty() && t.indexed_outputs)
    throw Error(Err::IndexMismatch, next_fns.begin()->second.line,
                "plain next_function with indexed outputs is ambiguous");

  return t;
}

std::string render_template(const FunctionTemplate& t) {
  std::ostringstream out;
  out << "name: " << t.name << "\n";
  out << "tier: " << t.tier << "\n";
  out << "handler: " << t.handler << "\n";
  out << "sync: " << (t.sync == SyncMode::Sync ? "sync" : "async") << "\n";
  if (t.cron) {
    out << "cron: " << render_cron_period(t.cron->period_ms) << "\n";
    if (t.cron->burst != 1) out << "cron_burst: " << t.cron->burst << "\n";
  }
  for (size_t i = 0; i < t.inputs.size(); i++) {
    if (i == 0)
      out << "input: " << t.inputs[i].str() << "\n";
    else
      out << "input" << (i + 1) << ": " << t.inputs[i].str() << "\n";
  }
  for (size_t i = 0; i < t.outputs.size(); i++) {
    if (t.indexed_outputs)
      out << "output" << (i + 1) << ": " << t.outputs[i].ref.str() << "\n";
    else
      out << "output: " << t.outputs[i].ref.str() << "\n";
  }
  bool plain_next = t.nexts.size() == 1 && t.nexts[0].first == 0;
  bool zero_indexed = !t.nexts.empty() && t.nexts[0].first == 0;
  for (size_t i = 0; i < t.nexts.size(); i++) {
    if (plain_next)
      out << "next_function: " << t.nexts[i].second.function << "\n";
    else if (zero_indexed)
      out << "next_function" << (i + 1) << ": " << t.nexts[i].second.function << "\n";
    else
      out << "next_function" << t.nexts[i].first << ": "
          << t.nexts[i].second.function << "\n";
  }
  for (size_t i = 0; i < t.nexts.size(); i++) {
    if (plain_next)
      out << "next_tier: " << t.nexts[i].second.tier << "\n";
    else if (zero_indexed)
      out << "next_tier" << (i + 1) << ": " << t.nexts[i].second.tier << "\n";
    else
      out << "next_tier" << t.nexts[i].first << ": " << t.nexts[i].second.tier
          << "\n";
  }
  return out.str();
}

FunctionTemplate load_template_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw Error(Err::Syntax, "cannot open template file '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return parse_template(buf.str());
  } catch (const Error& e) {
    throw Error(e.code(), e.line(), path + ": " + e.what());
  }
}

const char* err_name(Err e) {
  switch (e) {
    case Err::Syntax: return "SyntaxError";
    case Err::MissingKey: return "MissingKey";
    case Err::UnknownKey: return "UnknownKey";
    case Err::DuplicateKey: return "DuplicateKey";
    case Err::InvalidRef: return "InvalidRef";
    case Err::InvalidCron: return "InvalidCron";
    case Err::IndexMismatch: return "IndexMismatch";
    case Err::UnknownSuccessor: return "UnknownSuccessor";
    case Err::CycleDetected: return "CycleDetected";
    case Err::MultipleEntries: return "MultipleEntries";
    case Err::Unreachable: return "Unreachable";
    case Err::DuplicateFunction: return "DuplicateFunction";
    case Err::NoBranchMatch: return "NoBranchMatch";
    case Err::UnknownBackend: return "UnknownBackend";
    case Err::BackendUnavailable: return "BackendUnavailable";
    case Err::NotFound: return "NotFound";
    case Err::CapacityExceeded: return "CapacityExceeded";
    case Err::HandlerPanic: return "HandlerPanic";
    case Err::InputMissing: return "InputMissing";
    case Err::DownstreamFailure: return "DownstreamFailure";
    case Err::DuplicateHandler: return "DuplicateHandler";
    case Err::StartupValidation: return "StartupValidation";
    case Err::TierUnreachable: return "TierUnreachable";
    case Err::Timeout: return "Timeout";
    case Err::InvalidEnvelope: return "InvalidEnvelope";
    case Err::BindError: return "BindError";
    case Err::EmptySamples: return "EmptySamples";
    case Err::InvalidScenario: return "InvalidScenario";
  }
  return "Error";
}

}  // namespace edgeflow
