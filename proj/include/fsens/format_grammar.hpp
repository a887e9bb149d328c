#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "fsens/task_data.hpp"

namespace fsens {

enum class DescriptorTransform { title, upper, lower, identity };
enum class ItemStyle { arabic, latin_upper, latin_lower, roman_upper, roman_lower };

std::string_view to_string(DescriptorTransform t);
std::string_view to_string(ItemStyle s);
DescriptorTransform parse_descriptor_transform(std::string_view name);
ItemStyle parse_item_style(std::string_view name);

std::string apply_transform(DescriptorTransform t, std::string_view text);

/// Largest item count a style can enumerate.
std::size_t style_capacity(ItemStyle s);

/// The k-th (0-based) item of a style: "1", "B", "iii", ...
std::string style_item(ItemStyle s, std::size_t k);

/// Values each format component may take. Lists are deduplicated at load;
/// `original_sizes` keeps the pre-dedup lengths for reporting only.
struct FormatComponentCatalog {
  std::vector<DescriptorTransform> descriptor_transforms;
  std::vector<std::string> separators;
  std::vector<std::string> spaces;
  std::vector<std::string> text_option_separators;
  std::vector<ItemStyle> option_item_styles;
  std::vector<std::string> option_item_wrappers;
  std::map<std::string, std::size_t> original_sizes;

  /// List sizes in component order (3 or 6 entries).
  std::vector<std::size_t> component_sizes(bool with_options) const;

  void validate() const;
};

inline constexpr std::string_view kWrapperSlot = "{}";

/// The built-in component lists.
FormatComponentCatalog default_catalog();

/// Parses a catalog document; keys are the component names below. Literal
/// two-character escapes \n and \t inside values are interpreted.
FormatComponentCatalog catalog_from_json(const nlohmann::json& doc);
nlohmann::json catalog_to_json(const FormatComponentCatalog& catalog);

FormatComponentCatalog load_catalog(const std::optional<std::filesystem::path>& source = std::nullopt);

inline constexpr std::string_view kComponentNames[] = {
    "descriptor_transformation", "separator",         "space",
    "text_option_separator",     "option_item_style", "option_item_wrapper",
};

/// One chosen value (catalog index) per component. Option components are
/// unset for option-free tasks.
struct FormatSpec {
  std::size_t descriptor_transform = 0;
  std::size_t separator = 0;
  std::size_t space = 0;
  std::optional<std::size_t> text_option_separator;
  std::optional<std::size_t> option_item_style;
  std::optional<std::size_t> option_item_wrapper;

  bool has_options() const { return option_item_style.has_value(); }

  /// Indices in component order (3 or 6 entries).
  std::vector<std::size_t> indices() const;
  static FormatSpec from_indices(std::span<const std::size_t> idx);

  /// Compact index id, e.g. "f2.0.13.1.4.5".
  std::string id() const;

  /// Components whose index differs from the first catalog value.
  std::size_t non_default_count() const;

  auto operator<=>(const FormatSpec&) const = default;
};

void check_format(const FormatComponentCatalog& catalog, const FormatSpec& spec);

/// Stable hash of the component *values* (not indices), so results stay
/// joinable if a catalog is reordered.
std::string format_fingerprint(const FormatComponentCatalog& catalog, const FormatSpec& spec);

nlohmann::json format_to_json(const FormatSpec& spec);
FormatSpec format_from_json(const nlohmann::json& j);

std::uint64_t format_universe_size(const FormatComponentCatalog& catalog, bool with_options);

/// Mixed-radix decode of an index in [0, universe size).
FormatSpec format_at(const FormatComponentCatalog& catalog, bool with_options, std::uint64_t index);

/// n distinct formats sampled uniformly without replacement.
std::vector<FormatSpec> sample_formats(const FormatComponentCatalog& catalog, bool with_options,
                                       std::size_t n, std::uint64_t seed);

/// n distinct formats drawn from a seeded sub-grid of `values_per_component`
/// values per component (0 = smallest v >= 2 with v^components >= 2n), so
/// component values repeat and a compositional split is usually feasible.
std::vector<FormatSpec> sample_compositional_formats(const FormatComponentCatalog& catalog,
                                                     bool with_options, std::size_t n,
                                                     std::uint64_t seed,
                                                     std::size_t values_per_component = 0);

struct FormatSplit {
  std::vector<FormatSpec> train;
  std::vector<FormatSpec> test;
};

/// Splits formats so the test side holds only unseen component tuples built
/// from component values that all occur on the train side.
FormatSplit compositional_split(std::span<const FormatSpec> formats, std::uint64_t seed);

enum class RenderMode { completion, chat };

std::string_view to_string(RenderMode m);
RenderMode parse_render_mode(std::string_view s);

inline constexpr std::string_view kChatAdmonition =
    "PAY ATTENTION TO THE OUTPUT FORMAT -- ONLY OUTPUT THE ANSWER WITHOUT ANY OTHER TEXT, LIKE IN "
    "EXAMPLES.";

struct RenderedPrompt {
  RenderMode mode = RenderMode::completion;
  std::string text;         // completion mode
  std::string system_text;  // chat mode
  std::string user_text;    // chat mode
  /// One per answer class, in label-space order: what gets scored/matched.
  std::vector<std::string> answer_surface_forms;
  /// Rendered enumeration labels ("A)", "2.", ...) for multiple-choice tasks.
  std::vector<std::string> option_labels;

  /// The text the model continues from (completion text, or user text).
  const std::string& body() const { return mode == RenderMode::completion ? text : user_text; }

  bool operator==(const RenderedPrompt&) const = default;
};

/// k wrapped option labels.
std::vector<std::string> enumerate_option_labels(const FormatComponentCatalog& catalog,
                                                 std::size_t style, std::size_t wrapper, std::size_t k);

/// One instance block ("Question: ... A) ... Answer: <answer>") under a
/// format. An empty `answer` leaves the answer slot open.
std::string render_block(const Task& task, const FormatComponentCatalog& catalog,
                         const FormatSpec& spec, std::string_view input, std::string_view answer);

RenderedPrompt render(const Task& task, const Instance& instance, std::span<const Instance> demonstrations,
                      const FormatComponentCatalog& catalog, const FormatSpec& spec, RenderMode mode);

}  // namespace fsens
