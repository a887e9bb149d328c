#include "fsens/format_grammar.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <limits>
#include <map>
#include <set>

#include <spdlog/spdlog.h>

#include "fsens/error.hpp"
#include "fsens/hash.hpp"
#include "fsens/rng.hpp"

namespace fsens {
namespace {

bool is_ascii_alpha(unsigned char c) { return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z'); }

template <typename T>
std::vector<T> dedup_keep_first(const std::vector<T>& values) {
  std::vector<T> out;
  for (const auto& v : values) {
    if (std::find(out.begin(), out.end(), v) == out.end()) out.push_back(v);
  }
  return out;
}

std::string interpret_escapes(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '\\' && i + 1 < s.size()) {
      const char n = s[i + 1];
      if (n == 'n') {
        out.push_back('\n');
        ++i;
        continue;
      }
      if (n == 't') {
        out.push_back('\t');
        ++i;
        continue;
      }
      if (n == '\\') {
        out.push_back('\\');
        ++i;
        continue;
      }
    }
    out.push_back(s[i]);
  }
  return out;
}

std::string escape_backslashes(std::string_view s) {
  std::string out;
  for (char c : s) {
    if (c == '\\') out.push_back('\\');
    out.push_back(c);
  }
  return out;
}

std::size_t count_slots(std::string_view wrapper) {
  std::size_t count = 0;
  for (auto pos = wrapper.find(kWrapperSlot); pos != std::string_view::npos;
       pos = wrapper.find(kWrapperSlot, pos + kWrapperSlot.size())) {
    ++count;
  }
  return count;
}

std::string fill_slot(std::string_view wrapper, std::string_view item) {
  const auto pos = wrapper.find(kWrapperSlot);
  std::string out(wrapper.substr(0, pos));
  out += item;
  out += wrapper.substr(pos + kWrapperSlot.size());
  return out;
}

std::string to_roman(std::size_t n) {
  static constexpr std::pair<std::size_t, std::string_view> kTable[] = {
      {1000, "M"}, {900, "CM"}, {500, "D"}, {400, "CD"}, {100, "C"}, {90, "XC"}, {50, "L"},
      {40, "XL"},  {10, "X"},   {9, "IX"},  {5, "V"},   {4, "IV"},  {1, "I"},
  };
  std::string out;
  for (const auto& [value, numeral] : kTable) {
    while (n >= value) {
      out += numeral;
      n -= value;
    }
  }
  return out;
}

std::string lower_ascii(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

std::vector<std::string> string_list(const nlohmann::json& doc, std::string_view key) {
  const std::string k(key);
  if (!doc.contains(k)) throw Error(ErrorKind::schema, "catalog: missing component list '" + k + "'");
  const auto& v = doc.at(k);
  if (!v.is_array()) throw Error(ErrorKind::schema, "catalog: component '" + k + "' must be a list of strings");
  std::vector<std::string> out;
  for (const auto& item : v) {
    if (!item.is_string()) throw Error(ErrorKind::schema, "catalog: component '" + k + "' must be a list of strings");
    out.push_back(interpret_escapes(item.get<std::string>()));
  }
  return out;
}

}  // namespace

std::string_view to_string(DescriptorTransform t) {
  switch (t) {
    case DescriptorTransform::title: return "title";
    case DescriptorTransform::upper: return "upper";
    case DescriptorTransform::lower: return "lower";
    case DescriptorTransform::identity: return "identity";
  }
  return "identity";
}

std::string_view to_string(ItemStyle s) {
  switch (s) {
    case ItemStyle::arabic: return "arabic";
    case ItemStyle::latin_upper: return "latin_upper";
    case ItemStyle::latin_lower: return "latin_lower";
    case ItemStyle::roman_upper: return "roman_upper";
    case ItemStyle::roman_lower: return "roman_lower";
  }
  return "arabic";
}

DescriptorTransform parse_descriptor_transform(std::string_view name) {
  for (auto t : {DescriptorTransform::title, DescriptorTransform::upper, DescriptorTransform::lower,
                 DescriptorTransform::identity}) {
    if (to_string(t) == name) return t;
  }
  throw Error(ErrorKind::schema, "catalog: unknown descriptor transform '" + std::string(name) +
                                     "' (expected title|upper|lower|identity)");
}

ItemStyle parse_item_style(std::string_view name) {
  for (auto s : {ItemStyle::arabic, ItemStyle::latin_upper, ItemStyle::latin_lower, ItemStyle::roman_upper,
                 ItemStyle::roman_lower}) {
    if (to_string(s) == name) return s;
  }
  throw Error(ErrorKind::schema, "catalog: unknown option item style '" + std::string(name) + "'");
}

std::string apply_transform(DescriptorTransform t, std::string_view text) {
  std::string out(text);
  switch (t) {
    case DescriptorTransform::identity:
      break;
    case DescriptorTransform::upper:
      for (auto& c : out) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
      break;
    case DescriptorTransform::lower:
      for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
      break;
    case DescriptorTransform::title: {
      // str.title(): a letter is uppercased iff the previous character is not
      // a letter.
      bool prev_letter = false;
      for (auto& c : out) {
        const auto uc = static_cast<unsigned char>(c);
        if (is_ascii_alpha(uc)) {
          c = static_cast<char>(prev_letter ? std::tolower(uc) : std::toupper(uc));
          prev_letter = true;
        } else {
          prev_letter = false;
        }
      }
      break;
    }
  }
  return out;
}

std::size_t style_capacity(ItemStyle s) {
  switch (s) {
    case ItemStyle::arabic: return std::numeric_limits<std::size_t>::max();
    case ItemStyle::latin_upper:
    case ItemStyle::latin_lower: return 26;
    case ItemStyle::roman_upper:
    case ItemStyle::roman_lower: return 3999;
  }
  return 0;
}

std::string style_item(ItemStyle s, std::size_t k) {
  if (k >= style_capacity(s)) {
    throw Error(ErrorKind::capacity, "option item style " + std::string(to_string(s)) + " cannot enumerate item " +
                                         std::to_string(k + 1));
  }
  switch (s) {
    case ItemStyle::arabic: return std::to_string(k + 1);
    case ItemStyle::latin_upper: return std::string(1, static_cast<char>('A' + k));
    case ItemStyle::latin_lower: return std::string(1, static_cast<char>('a' + k));
    case ItemStyle::roman_upper: return to_roman(k + 1);
    case ItemStyle::roman_lower: return lower_ascii(to_roman(k + 1));
  }
  return {};
}

std::vector<std::size_t> FormatComponentCatalog::component_sizes(bool with_options) const {
  std::vector<std::size_t> sizes{descriptor_transforms.size(), separators.size(), spaces.size()};
  if (with_options) {
    sizes.push_back(text_option_separators.size());
    sizes.push_back(option_item_styles.size());
    sizes.push_back(option_item_wrappers.size());
  }
  return sizes;
}

void FormatComponentCatalog::validate() const {
  const auto sizes = component_sizes(true);
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    if (sizes[i] == 0) {
      throw Error(ErrorKind::validation, "catalog: component list '" + std::string(kComponentNames[i]) + "' is empty");
    }
  }
  for (const auto& w : option_item_wrappers) {
    if (count_slots(w) != 1) {
      throw Error(ErrorKind::validation, "catalog: option item wrapper '" + w + "' must contain exactly one {}");
    }
  }
}

FormatComponentCatalog default_catalog() {
  nlohmann::json doc = {
      {"descriptor_transformation", {"title", "upper", "lower", "identity"}},
      {"separator",
       {"", "::: ", ":: ", ": ", " \n\t", "\n ", " : ", " - ", " ", "\n ", "\n\t", ":", "::", "- ", "\t"}},
      {"space",
       {"", " ", "\n", " \n", " -- ", " ", "; \n", " || ", " <sep> ", " -- ", ", ", " \n ", " , ", "\n ", ". ",
        " , "}},
      {"text_option_separator", {"", " ", "  ", "\t"}},
      {"option_item_style", {"arabic", "latin_upper", "latin_lower", "roman_upper", "roman_lower"}},
      {"option_item_wrapper", {"({})", "{}.", "{})", "{} )", "[{}]", "<{}>"}},
  };
  return catalog_from_json(doc);
}

FormatComponentCatalog catalog_from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw Error(ErrorKind::schema, "catalog: document must be an object of component lists");
  FormatComponentCatalog c;

  auto record = [&](std::string_view key, std::size_t raw, std::size_t kept) {
    c.original_sizes[std::string(key)] = raw;
    if (raw != kept) spdlog::debug("catalog: '{}' has {} duplicate value(s); kept {}", key, raw - kept, kept);
  };

  std::vector<DescriptorTransform> transforms;
  for (const auto& name : string_list(doc, "descriptor_transformation")) {
    transforms.push_back(parse_descriptor_transform(name));
  }
  c.descriptor_transforms = dedup_keep_first(transforms);
  record("descriptor_transformation", transforms.size(), c.descriptor_transforms.size());

  auto load_strings = [&](std::string_view key, std::vector<std::string>& dst) {
    const auto raw = string_list(doc, key);
    dst = dedup_keep_first(raw);
    record(key, raw.size(), dst.size());
  };
  load_strings("separator", c.separators);
  load_strings("space", c.spaces);
  load_strings("text_option_separator", c.text_option_separators);

  std::vector<ItemStyle> styles;
  for (const auto& name : string_list(doc, "option_item_style")) styles.push_back(parse_item_style(name));
  c.option_item_styles = dedup_keep_first(styles);
  record("option_item_style", styles.size(), c.option_item_styles.size());

  load_strings("option_item_wrapper", c.option_item_wrappers);

  c.validate();
  return c;
}

nlohmann::json catalog_to_json(const FormatComponentCatalog& c) {
  auto strings = [](const std::vector<std::string>& v) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& s : v) arr.push_back(escape_backslashes(s));
    return arr;
  };
  nlohmann::json transforms = nlohmann::json::array();
  for (auto t : c.descriptor_transforms) transforms.push_back(std::string(to_string(t)));
  nlohmann::json styles = nlohmann::json::array();
  for (auto s : c.option_item_styles) styles.push_back(std::string(to_string(s)));
  return {
      {"descriptor_transformation", transforms},
      {"separator", strings(c.separators)},
      {"space", strings(c.spaces)},
      {"text_option_separator", strings(c.text_option_separators)},
      {"option_item_style", styles},
      {"option_item_wrapper", strings(c.option_item_wrappers)},
  };
}

FormatComponentCatalog load_catalog(const std::optional<std::filesystem::path>& source) {
  if (!source) return default_catalog();
  std::ifstream in(*source);
  if (!in) throw Error(ErrorKind::io, "catalog: cannot open " + source->string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorKind::schema, "catalog: " + source->string() + " is not valid JSON: " + e.what());
  }
  return catalog_from_json(doc);
}

std::vector<std::size_t> FormatSpec::indices() const {
  std::vector<std::size_t> out{descriptor_transform, separator, space};
  if (has_options()) {
    out.push_back(text_option_separator.value_or(0));
    out.push_back(*option_item_style);
    out.push_back(option_item_wrapper.value_or(0));
  }
  return out;
}

FormatSpec FormatSpec::from_indices(std::span<const std::size_t> idx) {
  if (idx.size() != 3 && idx.size() != 6) {
    throw Error(ErrorKind::validation, "format spec needs 3 or 6 component indices, got " + std::to_string(idx.size()));
  }
  FormatSpec f{idx[0], idx[1], idx[2], std::nullopt, std::nullopt, std::nullopt};
  if (idx.size() == 6) {
    f.text_option_separator = idx[3];
    f.option_item_style = idx[4];
    f.option_item_wrapper = idx[5];
  }
  return f;
}

std::string FormatSpec::id() const {
  std::string out = "f";
  const auto idx = indices();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (i) out += '.';
    out += std::to_string(idx[i]);
  }
  return out;
}

std::size_t FormatSpec::non_default_count() const {
  const auto idx = indices();
  return static_cast<std::size_t>(std::count_if(idx.begin(), idx.end(), [](std::size_t i) { return i != 0; }));
}

void check_format(const FormatComponentCatalog& catalog, const FormatSpec& spec) {
  const bool partial_options = spec.text_option_separator.has_value() != spec.option_item_style.has_value() ||
                               spec.option_item_style.has_value() != spec.option_item_wrapper.has_value();
  if (partial_options) {
    throw Error(ErrorKind::validation, "format " + spec.id() + ": option components must be all set or all unset");
  }
  const auto sizes = catalog.component_sizes(spec.has_options());
  const auto idx = spec.indices();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= sizes[i]) {
      throw Error(ErrorKind::validation, "format " + spec.id() + ": index " + std::to_string(idx[i]) +
                                             " out of range for component '" + std::string(kComponentNames[i]) + "'");
    }
  }
}

std::string format_fingerprint(const FormatComponentCatalog& catalog, const FormatSpec& spec) {
  check_format(catalog, spec);
  nlohmann::json values = nlohmann::json::array();
  values.push_back(std::string(to_string(catalog.descriptor_transforms[spec.descriptor_transform])));
  values.push_back(catalog.separators[spec.separator]);
  values.push_back(catalog.spaces[spec.space]);
  if (spec.has_options()) {
    values.push_back(catalog.text_option_separators[*spec.text_option_separator]);
    values.push_back(std::string(to_string(catalog.option_item_styles[*spec.option_item_style])));
    values.push_back(catalog.option_item_wrappers[*spec.option_item_wrapper]);
  }
  return sha256_hex(values.dump()).substr(0, 16);
}

nlohmann::json format_to_json(const FormatSpec& spec) { return spec.indices(); }

FormatSpec format_from_json(const nlohmann::json& j) {
  const auto idx = j.get<std::vector<std::size_t>>();
  return FormatSpec::from_indices(idx);
}

std::uint64_t format_universe_size(const FormatComponentCatalog& catalog, bool with_options) {
  std::uint64_t n = 1;
  for (auto s : catalog.component_sizes(with_options)) n *= s;
  return n;
}

FormatSpec format_at(const FormatComponentCatalog& catalog, bool with_options, std::uint64_t index) {
  const auto sizes = catalog.component_sizes(with_options);
  if (index >= format_universe_size(catalog, with_options)) {
    throw Error(ErrorKind::capacity, "format index " + std::to_string(index) + " outside the format universe");
  }
  std::vector<std::size_t> idx(sizes.size());
  for (std::size_t i = sizes.size(); i-- > 0;) {
    idx[i] = static_cast<std::size_t>(index % sizes[i]);
    index /= sizes[i];
  }
  return FormatSpec::from_indices(idx);
}

std::vector<FormatSpec> sample_formats(const FormatComponentCatalog& catalog, bool with_options, std::size_t n,
                                       std::uint64_t seed) {
  const auto universe = format_universe_size(catalog, with_options);
  if (n > universe) {
    throw Error(ErrorKind::capacity,
                "requested " + std::to_string(n) + " formats but only " + std::to_string(universe) + " exist");
  }
  Rng rng(seed);
  std::vector<FormatSpec> out;
  out.reserve(n);
  for (auto i : sample_without_replacement(universe, n, rng)) out.push_back(format_at(catalog, with_options, i));
  return out;
}

std::vector<FormatSpec> sample_compositional_formats(const FormatComponentCatalog& catalog, bool with_options,
                                                     std::size_t n, std::uint64_t seed,
                                                     std::size_t values_per_component) {
  const auto sizes = catalog.component_sizes(with_options);
  if (values_per_component == 0) {
    values_per_component = 2;
    auto grid = [&](std::size_t v) {
      std::uint64_t g = 1;
      for (auto s : sizes) g *= std::min<std::uint64_t>(v, s);
      return g;
    };
    std::size_t max_size = *std::max_element(sizes.begin(), sizes.end());
    while (grid(values_per_component) < 2 * static_cast<std::uint64_t>(n) && values_per_component < max_size) {
      ++values_per_component;
    }
  }
  Rng rng(seed);
  std::vector<std::vector<std::size_t>> pools;
  std::uint64_t grid = 1;
  for (auto s : sizes) {
    const auto k = std::min<std::size_t>(values_per_component, s);
    std::vector<std::size_t> pool;
    for (auto v : sample_without_replacement(s, k, rng)) pool.push_back(static_cast<std::size_t>(v));
    std::sort(pool.begin(), pool.end());
    grid *= pool.size();
    pools.push_back(std::move(pool));
  }
  if (n > grid) {
    throw Error(ErrorKind::capacity,
                "requested " + std::to_string(n) + " formats from a sub-grid of " + std::to_string(grid));
  }
  std::vector<FormatSpec> out;
  for (auto g : sample_without_replacement(grid, n, rng)) {
    std::vector<std::size_t> idx(pools.size());
    for (std::size_t i = pools.size(); i-- > 0;) {
      idx[i] = pools[i][g % pools[i].size()];
      g /= pools[i].size();
    }
    out.push_back(FormatSpec::from_indices(idx));
  }
  return out;
}

FormatSplit compositional_split(std::span<const FormatSpec> formats, std::uint64_t seed) {
  if (formats.size() < 4) {
    throw Error(ErrorKind::split_infeasible, "compositional split needs at least 4 formats, got " +
                                                 std::to_string(formats.size()));
  }
  const std::size_t width = formats.front().indices().size();
  for (const auto& f : formats) {
    if (f.indices().size() != width) {
      throw Error(ErrorKind::validation, "compositional split: formats mix option-bearing and option-free specs");
    }
  }

  // Identical tuples must land on the same side, so work on groups.
  std::vector<FormatSpec> groups;
  std::map<FormatSpec, std::size_t> multiplicity;
  for (const auto& f : formats) {
    if (multiplicity[f]++ == 0) groups.push_back(f);
  }
  // count[component][value] over the train side (initially everything).
  std::vector<std::map<std::size_t, std::size_t>> count(width);
  for (const auto& f : formats) {
    const auto idx = f.indices();
    for (std::size_t c = 0; c < width; ++c) ++count[c][idx[c]];
  }

  std::vector<std::size_t> order(groups.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));

  // Moving a group to test keeps every test value covered iff each of its
  // component values still occurs in train afterwards. A single movable group
  // exists whenever any valid split exists, so greedy finds one if possible.
  const std::size_t target = std::max<std::size_t>(1, groups.size() / 2);
  std::set<FormatSpec> test_set;
  for (auto gi : order) {
    if (test_set.size() >= target) break;
    const auto& g = groups[gi];
    const auto idx = g.indices();
    const auto m = multiplicity[g];
    bool movable = true;
    for (std::size_t c = 0; c < width && movable; ++c) movable = count[c][idx[c]] > m;
    if (!movable) continue;
    for (std::size_t c = 0; c < width; ++c) count[c][idx[c]] -= m;
    test_set.insert(g);
  }
  if (test_set.empty()) {
    throw Error(ErrorKind::split_infeasible,
                "no format can be held out: every format has a component value that occurs nowhere else");
  }

  FormatSplit split;
  for (const auto& f : formats) (test_set.count(f) ? split.test : split.train).push_back(f);
  return split;
}

std::string_view to_string(RenderMode m) { return m == RenderMode::chat ? "chat" : "completion"; }

RenderMode parse_render_mode(std::string_view s) {
  if (s == "completion") return RenderMode::completion;
  if (s == "chat") return RenderMode::chat;
  throw Error(ErrorKind::config, "unknown render mode '" + std::string(s) + "' (expected completion|chat)");
}

std::vector<std::string> enumerate_option_labels(const FormatComponentCatalog& catalog, std::size_t style,
                                                 std::size_t wrapper, std::size_t k) {
  if (k == 0) throw Error(ErrorKind::validation, "option labels: need at least one option");
  if (style >= catalog.option_item_styles.size() || wrapper >= catalog.option_item_wrappers.size()) {
    throw Error(ErrorKind::validation, "option labels: style/wrapper index out of range");
  }
  const auto s = catalog.option_item_styles[style];
  if (k > style_capacity(s)) {
    throw Error(ErrorKind::capacity, "option item style " + std::string(to_string(s)) + " supports at most " +
                                         std::to_string(style_capacity(s)) + " items, asked for " + std::to_string(k));
  }
  std::vector<std::string> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.push_back(fill_slot(catalog.option_item_wrappers[wrapper], style_item(s, i)));
  return out;
}

std::string render_block(const Task& task, const FormatComponentCatalog& catalog, const FormatSpec& spec,
                         std::string_view input, std::string_view answer) {
  check_format(catalog, spec);
  if (task.has_options() != spec.has_options()) {
    if (task.has_options()) {
      throw Error(ErrorKind::render, "task " + task.id + " has options but format " + spec.id() +
                                         " sets no option components");
    }
    throw Error(ErrorKind::validation, "task " + task.id + " has no options but format " + spec.id() +
                                           " sets option components");
  }
  const auto transform = catalog.descriptor_transforms[spec.descriptor_transform];
  const auto& sep = catalog.separators[spec.separator];
  const auto& space = catalog.spaces[spec.space];

  std::string out = apply_transform(transform, task.descriptors.input);
  out += sep;
  out += input;
  if (task.has_options()) {
    if (task.options->empty()) throw Error(ErrorKind::render, "task " + task.id + " has an empty option list");
    const auto labels =
        enumerate_option_labels(catalog, *spec.option_item_style, *spec.option_item_wrapper, task.options->size());
    const auto& text_sep = catalog.text_option_separators[*spec.text_option_separator];
    for (std::size_t i = 0; i < labels.size(); ++i) {
      out += space;
      out += labels[i];
      out += text_sep;
      out += (*task.options)[i];
    }
  }
  out += space;
  out += apply_transform(transform, task.descriptors.output);
  out += sep;
  out += answer;
  return out;
}

RenderedPrompt render(const Task& task, const Instance& instance, std::span<const Instance> demonstrations,
                      const FormatComponentCatalog& catalog, const FormatSpec& spec, RenderMode mode) {
  const auto labels = task.label_space();
  for (const auto& d : demonstrations) {
    if (std::find(labels.begin(), labels.end(), d.gold) == labels.end()) {
      throw Error(ErrorKind::render, "demonstration " + d.uid + " answer '" + d.gold + "' is not a class of task " +
                                         task.id);
    }
  }

  std::string blocks;
  for (const auto& d : demonstrations) {
    blocks += render_block(task, catalog, spec, d.input, d.gold);
    blocks += "\n\n";
  }
  blocks += render_block(task, catalog, spec, instance.input, "");

  RenderedPrompt p;
  p.mode = mode;
  if (mode == RenderMode::completion) {
    p.text = task.instruction.empty() ? blocks : task.instruction + "\n\n" + blocks;
  } else {
    p.system_text = task.instruction.empty() ? std::string(kChatAdmonition)
                                             : task.instruction + "\n" + std::string(kChatAdmonition);
    p.user_text = std::move(blocks);
  }
  p.answer_surface_forms = labels;
  if (task.has_options()) {
    p.option_labels =
        enumerate_option_labels(catalog, *spec.option_item_style, *spec.option_item_wrapper, task.options->size());
  }
  return p;
}

}  // namespace fsens
