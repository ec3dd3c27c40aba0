#ifndef CBLLM_DATASET_HPP_
#define CBLLM_DATASET_HPP_

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cbllm/common.hpp"
#include "json.hpp"

namespace cbllm {

// RFC 4180 records: quoted fields may hold the delimiter, newlines and ""
// escapes. CRLF and LF line ends both accepted.
inline std::vector<std::vector<std::string>> parse_delimited(std::string_view text,
                                                             char delim = ',') {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false, field_started = false;
  std::size_t line = 1;
  auto end_field = [&] {
    row.push_back(std::move(field));
    field.clear();
    field_started = false;
  };
  auto end_row = [&] {
    end_field();
    if (!(row.size() == 1 && row[0].empty())) rows.push_back(std::move(row));
    row.clear();
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        if (c == '\n') ++line;
        field += c;
      }
      continue;
    }
    if (c == '"' && !field_started && field.empty()) {
      quoted = true;
      field_started = true;
    } else if (c == delim) {
      end_field();
    } else if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') {
      // handled by the '\n'
    } else if (c == '\n') {
      end_row();
      ++line;
    } else {
      field += c;
      field_started = true;
    }
  }
  if (quoted) throw ParseError("unterminated quoted field (line " + std::to_string(line) + ")");
  if (field_started || !field.empty() || !row.empty()) end_row();
  return rows;
}

inline std::string quote_field(std::string_view s, char delim = ',') {
  if (s.find_first_of(std::string("\"\r\n") + delim) == std::string_view::npos) {
    return std::string(s);
  }
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

struct DatasetSplit {
  std::string name;
  std::vector<std::string> texts;
  std::vector<std::size_t> labels;
  std::vector<std::string> class_names;

  std::size_t size() const { return texts.size(); }
  std::size_t n_classes() const { return class_names.size(); }
};

inline std::size_t parse_label(std::string_view s, std::size_t n_classes,
                               const std::string& where) {
  auto t = trim(s);
  std::size_t v = 0;
  auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || ec != std::errc() || p != t.data() + t.size()) {
    throw ValidationError(where + ": label '" + t + "' is not a class index");
  }
  if (v >= n_classes) {
    throw ValidationError(where + ": label " + std::to_string(v) + " out of range for " +
                          std::to_string(n_classes) + " classes");
  }
  return v;
}

// Header row must name a "text" and a "label" column (any order).
inline DatasetSplit parse_dataset(std::string_view csv, std::vector<std::string> class_names,
                                  std::string split_name = "data", char delim = ',') {
  if (class_names.size() < 2) throw ValidationError("a dataset needs at least 2 classes");
  auto rows = parse_delimited(csv, delim);
  if (rows.empty()) throw ValidationError(split_name + ": missing header row");
  const auto& header = rows[0];
  std::size_t text_col = header.size(), label_col = header.size();
  for (std::size_t c = 0; c < header.size(); ++c) {
    auto h = fold_key(header[c]);
    if (h == "text" || h == "sentence") text_col = c;
    if (h == "label") label_col = c;
  }
  if (text_col == header.size() || label_col == header.size()) {
    throw ValidationError(split_name + ": header needs 'text' and 'label' columns");
  }
  DatasetSplit d{std::move(split_name), {}, {}, std::move(class_names)};
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const std::string where = d.name + " row " + std::to_string(r);
    if (rows[r].size() != header.size()) {
      throw ValidationError(where + ": expected " + std::to_string(header.size()) +
                            " columns, got " + std::to_string(rows[r].size()));
    }
    if (trim(rows[r][text_col]).empty()) throw ValidationError(where + ": empty text");
    d.texts.push_back(rows[r][text_col]);
    d.labels.push_back(parse_label(rows[r][label_col], d.n_classes(), where));
  }
  return d;
}

inline std::string format_dataset(const DatasetSplit& d) {
  std::string out = "text,label\n";
  for (std::size_t i = 0; i < d.size(); ++i) {
    out += quote_field(d.texts[i]) + "," + std::to_string(d.labels[i]) + "\n";
  }
  return out;
}

// Manifest: {"dataset": id, "classes": [names], "splits": {"train": "train.csv", ...}}.
// Split paths are relative to the manifest.
struct DatasetManifest {
  std::string dataset_id;
  std::vector<std::string> class_names;
  std::map<std::string, std::filesystem::path> splits;
};

inline DatasetManifest load_manifest(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path + ": " + e.what());
  }
  DatasetManifest m;
  try {
    m.dataset_id = j.at("dataset").get<std::string>();
    m.class_names = j.at("classes").get<std::vector<std::string>>();
    auto base = std::filesystem::path(path).parent_path();
    for (const auto& [name, p] : j.at("splits").items()) {
      m.splits[name] = base / p.get<std::string>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
  if (m.class_names.size() < 2) throw ValidationError(path + ": need at least 2 classes");
  return m;
}

inline DatasetSplit load_split(const DatasetManifest& m, const std::string& split) {
  auto it = m.splits.find(split);
  if (it == m.splits.end()) {
    throw ValidationError("dataset " + m.dataset_id + " has no split '" + split + "'");
  }
  return parse_dataset(read_text_file(it->second.string()), m.class_names, split);
}

inline void save_dataset(const DatasetManifest& m,
                         const std::vector<DatasetSplit>& splits,
                         const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json j;
  j["dataset"] = m.dataset_id;
  j["classes"] = m.class_names;
  j["splits"] = nlohmann::ordered_json::object();
  for (const auto& s : splits) {
    const auto file = s.name + ".csv";
    write_text_file((dir / file).string(), format_dataset(s));
    j["splits"][s.name] = file;
  }
  write_text_file((dir / "manifest.json").string(), j.dump(2) + "\n");
}

// Seeded holdout for datasets that ship no validation split (5% default).
// Original order is kept within each part.
inline std::pair<DatasetSplit, DatasetSplit> holdout_split(const DatasetSplit& train,
                                                           std::uint64_t seed,
                                                           double fraction = 0.05) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ValidationError("holdout fraction in (0,1)");
  std::vector<std::size_t> idx(train.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(seed ^ 0x401D07ULL);
  rng.shuffle(idx);
  auto n_val = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(idx.size())));
  n_val = std::clamp<std::size_t>(n_val, 1, idx.size() - 1);
  std::vector<bool> is_val(train.size(), false);
  for (std::size_t i = 0; i < n_val; ++i) is_val[idx[i]] = true;
  DatasetSplit tr{train.name, {}, {}, train.class_names};
  DatasetSplit va{"validation", {}, {}, train.class_names};
  for (std::size_t i = 0; i < train.size(); ++i) {
    auto& dst = is_val[i] ? va : tr;
    dst.texts.push_back(train.texts[i]);
    dst.labels.push_back(train.labels[i]);
  }
  return {std::move(tr), std::move(va)};
}

}  // namespace cbllm

#endif  // CBLLM_DATASET_HPP_
