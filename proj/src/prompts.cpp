#include "avatar/prompts.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "avatar/checkpoint.hpp"
#include "avatar/errors.hpp"

namespace av {

using nlohmann::json;

const char* view_name(ViewClass v) {
  switch (v) {
    case ViewClass::Front: return "front";
    case ViewClass::Side: return "side";
    case ViewClass::Back: return "back";
  }
  return "?";
}

const ViewText& ViewRules::text(ViewClass v) const {
  switch (v) {
    case ViewClass::Front: return front;
    case ViewClass::Side: return side;
    case ViewClass::Back: return back;
  }
  return front;
}

const StyleEntry& PromptTables::style(const std::string& name) const {
  for (const auto& s : styles)
    if (s.name == name) return s;
  throw std::out_of_range("unknown style '" + name + "'");
}

int PromptTables::style_index(const std::string& name) const {
  for (std::size_t i = 0; i < styles.size(); ++i)
    if (styles[i].name == name) return static_cast<int>(i);
  throw std::out_of_range("unknown style '" + name + "'");
}

namespace {

[[noreturn]] void fail(const std::string& origin, const std::string& field, const std::string& what) {
  throw SchemaError(origin + ": " + field + ": " + what);
}

void only_keys(const json& j, std::initializer_list<const char*> keys, const std::string& origin,
               const std::string& where) {
  for (const auto& [k, v] : j.items())
    if (std::none_of(keys.begin(), keys.end(), [&](const char* a) { return k == a; }))
      fail(origin, where + k, "unknown key");
}

std::string get_string(const json& j, const char* key, const std::string& origin, const std::string& where,
                       bool allow_empty = false) {
  if (!j.contains(key)) fail(origin, where + key, "missing");
  if (!j[key].is_string()) fail(origin, where + key, "expected a string");
  auto s = j[key].get<std::string>();
  if (s.empty() && !allow_empty) fail(origin, where + key, "must not be empty");
  return s;
}

double get_number(const json& j, const char* key, const std::string& origin, const std::string& where) {
  if (!j.contains(key)) fail(origin, where + key, "missing");
  if (!j[key].is_number()) fail(origin, where + key, "expected a number");
  return j[key].get<double>();
}

ViewText parse_view(const json& j, const std::string& origin, const std::string& where) {
  if (!j.is_object()) fail(origin, where, "expected an object");
  only_keys(j, {"positive", "negative"}, origin, where + ".");
  return {get_string(j, "positive", origin, where + "."), get_string(j, "negative", origin, where + ".", true)};
}

}  // namespace

PromptTables parse_tables(const std::string& text, const std::string& origin) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    const auto upto = std::min<std::size_t>(e.byte, text.size());
    const auto line = 1 + std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(upto), '\n');
    throw SchemaError(origin + ":" + std::to_string(line) + ": malformed JSON (" + e.what() + ")");
  }
  if (!doc.is_object()) fail(origin, "<root>", "expected an object");
  only_keys(doc, {"schema", "styles", "attributes", "view_rules"}, origin, "");
  if (get_string(doc, "schema", origin, "") != "prompt-tables/1") fail(origin, "schema", "unsupported version");

  PromptTables t;
  if (!doc.contains("styles") || !doc["styles"].is_array() || doc["styles"].empty())
    fail(origin, "styles", "expected a non-empty array");
  std::set<std::string> seen;
  for (std::size_t i = 0; i < doc["styles"].size(); ++i) {
    const auto& s = doc["styles"][i];
    const std::string where = "styles[" + std::to_string(i) + "].";
    if (!s.is_object()) fail(origin, where, "expected an object");
    only_keys(s, {"name", "prompt", "source"}, origin, where);
    StyleEntry e{get_string(s, "name", origin, where), get_string(s, "prompt", origin, where),
                 get_string(s, "source", origin, where)};
    if (e.source != "manual" && e.source != "generated") fail(origin, where + "source", "must be manual or generated");
    if (!seen.insert(e.name).second) fail(origin, where + "name", "duplicate style '" + e.name + "'");
    t.styles.push_back(std::move(e));
  }

  if (!doc.contains("attributes") || !doc["attributes"].is_object()) fail(origin, "attributes", "expected an object");
  for (const auto& [name, cats] : doc["attributes"].items()) {
    const std::string where = "attributes." + name;
    if (!cats.is_array() || cats.size() < 2) fail(origin, where, "needs at least 2 categories");
    std::vector<std::string> cs;
    for (const auto& c : cats) {
      if (!c.is_string() || c.get<std::string>().empty()) fail(origin, where, "categories must be non-empty strings");
      cs.push_back(c.get<std::string>());
    }
    t.attributes.emplace(name, std::move(cs));
  }

  if (!doc.contains("view_rules") || !doc["view_rules"].is_object()) fail(origin, "view_rules", "expected an object");
  const auto& vr = doc["view_rules"];
  only_keys(vr, {"separator", "front_below_abs_yaw", "side_below_abs_yaw", "views", "negative_always"}, origin,
            "view_rules.");
  auto& r = t.view_rules;
  r.separator = get_string(vr, "separator", origin, "view_rules.");
  r.front_below_abs_yaw = get_number(vr, "front_below_abs_yaw", origin, "view_rules.");
  r.side_below_abs_yaw = get_number(vr, "side_below_abs_yaw", origin, "view_rules.");
  if (!(0 <= r.front_below_abs_yaw && r.front_below_abs_yaw <= r.side_below_abs_yaw && r.side_below_abs_yaw <= 180))
    fail(origin, "view_rules", "need 0 <= front_below_abs_yaw <= side_below_abs_yaw <= 180");
  r.negative_always = get_string(vr, "negative_always", origin, "view_rules.", true);
  if (!vr.contains("views") || !vr["views"].is_object()) fail(origin, "view_rules.views", "expected an object");
  const auto& views = vr["views"];
  only_keys(views, {"front", "side", "back"}, origin, "view_rules.views.");
  for (const char* v : {"front", "side", "back"})
    if (!views.contains(v)) fail(origin, std::string("view_rules.views.") + v, "missing");
  r.front = parse_view(views["front"], origin, "view_rules.views.front");
  r.side = parse_view(views["side"], origin, "view_rules.views.side");
  r.back = parse_view(views["back"], origin, "view_rules.views.back");
  return t;
}

PromptTables load_tables(const std::filesystem::path& path) { return parse_tables(read_file(path), path.string()); }

const PromptTables& default_tables() {
  static const PromptTables tables = parse_tables(
#include "prompt_tables.inc"
      , "bundled prompt tables");
  return tables;
}

ViewClass classify_view(double yaw_deg, const ViewRules& rules) {
  const double a = std::abs(normalize_yaw(yaw_deg));
  if (a < rules.front_below_abs_yaw) return ViewClass::Front;
  if (a < rules.side_below_abs_yaw) return ViewClass::Side;
  return ViewClass::Back;
}

std::vector<AttributeChoice> sample_attributes(Rng& rng, const PromptTables& tables, int count) {
  if (count < 0 || static_cast<std::size_t>(count) > tables.attributes.size())
    throw std::invalid_argument("sample_attributes: table has " + std::to_string(tables.attributes.size()) +
                                " attributes, " + std::to_string(count) + " requested");
  std::vector<const std::pair<const std::string, std::vector<std::string>>*> rows;
  for (const auto& row : tables.attributes) rows.push_back(&row);
  std::vector<AttributeChoice> out;
  for (int i = 0; i < count; ++i) {
    const std::size_t j = static_cast<std::size_t>(i) + rng.index(rows.size() - static_cast<std::size_t>(i));
    std::swap(rows[static_cast<std::size_t>(i)], rows[j]);
    const auto& [name, cats] = *rows[static_cast<std::size_t>(i)];
    out.push_back({name, cats[rng.index(cats.size())]});
  }
  return out;
}

PromptBundle assemble(const StyleEntry& style, ViewClass view, std::vector<AttributeChoice> attributes,
                      const ViewRules& rules) {
  PromptBundle b;
  b.style = style.name;
  b.style_text = style.prompt;
  b.view = view;
  b.view_text = rules.text(view).positive;
  b.attributes = std::move(attributes);

  std::vector<std::string> pos{b.style_text, b.view_text};
  for (const auto& a : b.attributes) pos.push_back(a.category);
  std::vector<std::string> neg;
  if (!rules.text(view).negative.empty()) neg.push_back(rules.text(view).negative);
  if (!rules.negative_always.empty()) neg.push_back(rules.negative_always);

  auto join = [&](const std::vector<std::string>& parts) {
    std::string s;
    for (const auto& p : parts) {
      if (p.empty()) continue;
      if (!s.empty()) s += rules.separator;
      s += p;
    }
    return s;
  };
  b.positive = join(pos);
  b.negative = join(neg);
  return b;
}

PromptBundle compose(const std::string& style_name, const SphericalPose& pose, Rng& rng, const PromptTables& tables,
                     int n_attributes) {
  const auto& style = tables.style(style_name);
  return assemble(style, classify_view(pose.yaw_deg, tables.view_rules), sample_attributes(rng, tables, n_attributes),
                  tables.view_rules);
}

}  // namespace av
