#pragma once

// Files: 8-bit PNG rasters, patch sidecars carrying the unquantised floats,
// content digests, and CSV / Markdown reports. Everything written here is a
// pure function of its inputs so repeated runs produce identical bytes.

#include <png.h>
#include <openssl/evp.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "camopatch/evaluation.hpp"
#include "camopatch/patch_optimizer.hpp"
#include "camopatch/raster.hpp"

namespace camo::io {

namespace fs = std::filesystem;
using nlohmann::json;

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Bytes and digests.

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Writes via a temporary and a rename so readers never see half a file.
inline void write_file(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline std::string hex_digest(const EVP_MD* md, std::string_view a, std::string_view b = {}) {
  unsigned char out[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  const bool ok = ctx && EVP_DigestInit_ex(ctx, md, nullptr) && EVP_DigestUpdate(ctx, a.data(), a.size()) &&
                  EVP_DigestUpdate(ctx, b.data(), b.size()) && EVP_DigestFinal_ex(ctx, out, &len);
  EVP_MD_CTX_free(ctx);
  if (!ok) throw IoError("digest computation failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string s;
  for (unsigned i = 0; i < len; ++i) {
    s += kHex[out[i] >> 4];
    s += kHex[out[i] & 15];
  }
  return s;
}

inline std::string sha256_hex(std::string_view bytes) { return hex_digest(EVP_sha256(), bytes); }

/// Same id `git hash-object` prints for a file with these bytes.
inline std::string git_blob_digest(std::string_view bytes) {
  const std::string header = "blob " + std::to_string(bytes.size()) + std::string(1, '\0');
  return hex_digest(EVP_sha1(), header, bytes);
}

/// Digest of a raster's exact double values (shape included).
inline std::string raster_digest(const RgbRaster& r) {
  std::string bytes = std::to_string(r.height()) + "x" + std::to_string(r.width()) + ":";
  bytes.append(reinterpret_cast<const char*>(r.values().data()), r.values().size() * sizeof(double));
  return sha256_hex(bytes);
}

// ---------------------------------------------------------------------------
// PNG.

inline std::uint8_t quantize(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
}

inline std::string encode_png(const RgbRaster& r) {
  if (r.height() < 1 || r.width() < 1) throw InvalidArgument("encode_png: empty raster");
  std::vector<std::uint8_t> px(r.size());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = quantize(r.values()[i]);
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = png_uint_32(r.width());
  img.height = png_uint_32(r.height());
  img.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, px.data(), 0, nullptr))
    throw IoError(std::string("png encode failed: ") + img.message);
  std::string out(size, '\0');
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, px.data(), 0, nullptr))
    throw IoError(std::string("png encode failed: ") + img.message);
  out.resize(size);
  return out;
}

inline RgbImage decode_png(std::string_view bytes, const std::string& what = "png") {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size()))
    throw IoError(what + ": " + img.message);
  img.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> px(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, px.data(), 0, nullptr)) {
    png_image_free(&img);
    throw IoError(what + ": " + img.message);
  }
  RgbImage out(int(img.height), int(img.width));
  for (std::size_t i = 0; i < px.size(); ++i) out.values()[i] = px[i];
  return out;
}

inline void write_png(const fs::path& path, const RgbRaster& r) { write_file(path, encode_png(r)); }
inline RgbImage read_png(const fs::path& path) { return decode_png(read_file(path), path.string()); }

// ---------------------------------------------------------------------------
// JSON helpers for shared types.

inline json to_json(const BoundingBox& b) {
  return {{"x_min", b.x_min}, {"y_min", b.y_min}, {"x_max", b.x_max}, {"y_max", b.y_max}};
}

inline BoundingBox box_from_json(const json& j) {
  BoundingBox b{j.at("x_min").get<double>(), j.at("y_min").get<double>(), j.at("x_max").get<double>(),
                j.at("y_max").get<double>()};
  if (!b.valid()) throw InvalidArgument("box must satisfy x_min < x_max and y_min < y_max");
  return b;
}

inline json to_json(const PatchPlacement& p) {
  return {{"top_left_x", p.top_left_x}, {"top_left_y", p.top_left_y}, {"patch_height", p.patch_height},
          {"patch_width", p.patch_width}};
}

inline PatchPlacement placement_from_json(const json& j) {
  return {j.at("top_left_x").get<int>(), j.at("top_left_y").get<int>(), j.at("patch_height").get<int>(),
          j.at("patch_width").get<int>()};
}

/// Ground truth file: {"images": [{"boxes": [{x_min.., class_id}]}]}, one
/// entry per image in the order images are listed.
inline eval::GroundTruth truth_from_json(const json& j) {
  eval::GroundTruth truth;
  for (const auto& img : j.at("images")) {
    std::vector<eval::TruthBox> boxes;
    for (const auto& b : img.at("boxes")) boxes.push_back({box_from_json(b), b.value("class_id", 0)});
    truth.push_back(std::move(boxes));
  }
  return truth;
}

inline json to_json(const eval::GroundTruth& truth) {
  json images = json::array();
  for (const auto& per : truth) {
    json boxes = json::array();
    for (const auto& t : per) {
      auto b = to_json(t.box);
      b["class_id"] = t.class_id;
      boxes.push_back(b);
    }
    images.push_back({{"boxes", boxes}});
  }
  return {{"images", images}};
}

// ---------------------------------------------------------------------------
// Patch artifact: PNG plus sidecar.

struct PatchArtifact {
  RgbRaster patch;
  PatchPlacement placement;
  std::string config_hash;
  std::string image_digest;  ///< raster_digest of the image the patch was trained on
  int step = 0;
  std::string rng_state;
};

inline constexpr const char* kSidecarFormat = "camopatch-patch/1";

/// Sidecar for an artifact whose PNG bytes are `png`. Pixels stay as the
/// exact floats; `png_digest` ties the sidecar to its PNG.
inline json sidecar_json(const PatchArtifact& a, std::string_view png) {
  return {{"format", kSidecarFormat},
          {"height", a.patch.height()},
          {"width", a.patch.width()},
          {"pixels", a.patch.values()},
          {"placement", to_json(a.placement)},
          {"config_hash", a.config_hash},
          {"image_digest", a.image_digest},
          {"png_digest", git_blob_digest(png)},
          {"step", a.step},
          {"rng_state", a.rng_state}};
}

/// Writes <stem>.png and <stem>.json; returns the sidecar path.
inline fs::path write_artifact(const fs::path& stem, const PatchArtifact& a) {
  for (double v : a.patch.values())
    if (!(v >= 0.0 && v <= 255.0)) throw InvalidArgument("write_artifact: patch values must lie in [0, 255]");
  const std::string png = encode_png(a.patch);
  fs::path png_path = stem, json_path = stem;
  png_path += ".png";
  json_path += ".json";
  write_file(png_path, png);
  write_file(json_path, sidecar_json(a, png).dump(1) + "\n");
  return json_path;
}

/// Loads a sidecar. When the neighbouring PNG exists it must match both the
/// recorded digest and the rounded floats.
inline PatchArtifact read_artifact(const fs::path& sidecar_path) {
  json j;
  try {
    j = json::parse(read_file(sidecar_path));
  } catch (const json::parse_error& e) {
    throw IoError(sidecar_path.string() + ": " + e.what());
  }
  if (j.value("format", "") != kSidecarFormat) throw IoError(sidecar_path.string() + ": not a patch sidecar");
  PatchArtifact a;
  try {
    a.patch = RgbRaster(j.at("height").get<int>(), j.at("width").get<int>(), j.at("pixels").get<std::vector<double>>());
    a.placement = placement_from_json(j.at("placement"));
    a.config_hash = j.at("config_hash").get<std::string>();
    a.image_digest = j.at("image_digest").get<std::string>();
    a.step = j.at("step").get<int>();
    a.rng_state = j.at("rng_state").get<std::string>();
  } catch (const json::exception& e) {
    throw IoError(sidecar_path.string() + ": " + e.what());
  }
  if (a.placement.patch_height != a.patch.height() || a.placement.patch_width != a.patch.width())
    throw IoError(sidecar_path.string() + ": placement does not match the patch shape");
  fs::path png_path = sidecar_path;
  png_path.replace_extension(".png");
  if (fs::exists(png_path)) {
    const std::string png = read_file(png_path);
    if (git_blob_digest(png) != j.at("png_digest").get<std::string>())
      throw IoError(png_path.string() + ": digest does not match its sidecar");
    const RgbImage bytes = decode_png(png, png_path.string());
    if (!bytes.same_shape(a.patch)) throw IoError(png_path.string() + ": shape does not match its sidecar");
    for (std::size_t i = 0; i < bytes.size(); ++i)
      if (bytes.values()[i] != quantize(a.patch.values()[i]))
        throw IoError(png_path.string() + ": pixels do not match the sidecar floats");
  }
  return a;
}

// ---------------------------------------------------------------------------
// Reports.

/// Shortest text that reads back to the same double.
inline std::string num(double v) {
  char buf[32];
  for (int precision = 6; precision <= 17; ++precision) {
    std::snprintf(buf, sizeof buf, "%.*g", precision, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

inline std::string fixed(double v, int digits = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

/// Deterministic columns only; wall times go to the timing file.
inline std::string run_record_csv(const patch::RunRecord& record) {
  std::string s = "step,map50,perc_distance,dlr,plr_max\n";
  for (const auto& r : record)
    s += std::to_string(r.step) + "," + num(r.map50) + "," + num(r.perc) + "," + num(r.dlr) + "," + num(r.plr_max) + "\n";
  return s;
}

inline std::string timing_csv(const patch::RunRecord& record) {
  std::string s = "step,seconds\n";
  for (const auto& r : record) s += std::to_string(r.step) + "," + num(r.seconds) + "\n";
  return s;
}

inline std::string eval_report_csv(const eval::EvalReport& r) {
  std::string s = "metric,value\nmap50_percent," + num(r.map50_percent) + "\nmean_perc_distance," +
                  num(r.mean_perc_distance) + "\n";
  for (std::size_t i = 0; i < r.thresholds.size(); ++i)
    s += "ap_at_" + num(r.thresholds[i]) + "," + num(r.per_threshold_ap[i]) + "\n";
  return s;
}

inline std::string eval_report_markdown(const eval::EvalReport& r) {
  std::string s = "| mAP (%) | Mean PerC Distance |";
  std::string rule = "|---|---|";
  std::string row = "| " + fixed(r.map50_percent) + " | " + fixed(r.mean_perc_distance) + " |";
  for (std::size_t i = 0; i < r.thresholds.size(); ++i) {
    s += " AP@" + num(r.thresholds[i]) + " |";
    rule += "---|";
    row += " " + fixed(r.per_threshold_ap[i], 4) + " |";
  }
  s += "\n" + rule + "\n" + row + "\n";
  for (const auto& d : r.diagnostics) s += "\n> " + d + "\n";
  return s;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

inline std::string score_table_csv(const eval::ScoreTable& t) {
  std::string s = "label,map50,mean_perc,rank_map,rank_perc,combined\n";
  for (const auto& r : t.rows)
    s += csv_field(r.label) + "," + num(r.map50) + "," + num(r.mean_perc) + "," + std::to_string(r.rank_map) + "," +
         std::to_string(r.rank_perc) + "," + std::to_string(r.combined) + "\n";
  return s;
}

/// Comparison table; the best value of each column is bolded.
inline std::string score_table_markdown(const eval::ScoreTable& t, const std::string& first_column = "Patch") {
  auto bold = [](bool on, const std::string& s) { return on ? "**" + s + "**" : s; };
  int best_combined = 0;
  double best_map = 0, best_perc = 0;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto& r = t.rows[i];
    if (i == 0 || r.combined < best_combined) best_combined = r.combined;
    if (i == 0 || r.map50 < best_map) best_map = r.map50;
    if (i == 0 || r.mean_perc < best_perc) best_perc = r.mean_perc;
  }
  std::string s = "| " + first_column + " | mAP (%) | Mean PerC Distance | Combined Score |\n|---|---|---|---|\n";
  for (const auto& r : t.rows)
    s += "| " + r.label + " | " + bold(r.map50 == best_map, fixed(r.map50)) + " | " +
         bold(r.mean_perc == best_perc, fixed(r.mean_perc)) + " | " +
         bold(r.combined == best_combined, std::to_string(r.combined)) + " |\n";
  for (const auto& a : t.annotations) s += "\n> " + a + "\n";
  return s;
}

/// Offline scoring input: CSV with a header and columns label,map50,mean_perc.
inline std::vector<eval::ScoreInput> score_inputs_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::vector<eval::ScoreInput> rows;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line_no == 1) continue;
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() != 3) throw InvalidArgument("scores line " + std::to_string(line_no) + ": expected label,map50,mean_perc");
    try {
      std::size_t used_a = 0, used_b = 0;
      const double m = std::stod(cells[1], &used_a), p = std::stod(cells[2], &used_b);
      if (used_a != cells[1].size() || used_b != cells[2].size()) throw std::invalid_argument("trailing text");
      rows.push_back({cells[0], m, p});
    } catch (const std::logic_error&) {
      throw InvalidArgument("scores line " + std::to_string(line_no) + ": values must be numbers");
    }
  }
  return rows;
}

}  // namespace camo::io
