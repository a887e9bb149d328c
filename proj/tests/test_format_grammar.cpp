#include <doctest.h>

#include <fstream>
#include <set>

#include "fsens/error.hpp"
#include "fsens/format_grammar.hpp"
#include "fsens/rng.hpp"
#include "support.hpp"

using namespace fsens;
using fsens::testing::TempDir;

namespace {

Task two_option_task() {
  Task t;
  t.id = "task900";
  t.instruction = "Answer the question.";
  t.options = std::vector<std::string>{"yes", "no"};
  t.instances = {{"u0", "Is the sky blue?", "yes"}, {"u1", "Is grass red?", "no"}, {"u2", "Is snow cold?", "yes"}};
  return t;
}

FormatComponentCatalog toy_catalog() {
  nlohmann::json doc = {
      {"descriptor_transformation", {"identity", "upper"}},
      {"separator", {": ", "- "}},
      {"space", {" ", "\\n"}},
      {"text_option_separator", {" ", "\\t"}},
      {"option_item_style", {"arabic", "latin_upper"}},
      {"option_item_wrapper", {"{})", "[{}]"}},
  };
  return catalog_from_json(doc);
}

ErrorKind kind_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  return ErrorKind::undefined;
}

// The raw component lists,
// duplicates included; the oracle deduplicates them with std::set.
const std::vector<std::vector<std::string>> kPrintedLists = {
    {"title", "upper", "lower", "identity"},
    {"", "::: ", ":: ", ": ", " \n\t", "\n ", " : ", " - ", " ", "\n ", "\n\t", ":", "::", "- ", "\t"},
    {"", " ", "\n", " \n", " -- ", " ", "; \n", " || ", " <sep> ", " -- ", ", ", " \n ", " , ", "\n ", ". ", " , "},
    {"", " ", "  ", "\t"},
    {"1", "A", "a", "I", "i"},
    {"({})", "{}.", "{})", "{} )", "[{}]", "<{}>"},
};

}  // namespace

TEST_CASE("default catalog loads the four descriptor transforms and five item styles") {
  const auto c = load_catalog();
  REQUIRE(c.descriptor_transforms.size() == 4);
  CHECK(c.descriptor_transforms[0] == DescriptorTransform::title);
  CHECK(c.descriptor_transforms[1] == DescriptorTransform::upper);
  CHECK(c.descriptor_transforms[2] == DescriptorTransform::lower);
  CHECK(c.descriptor_transforms[3] == DescriptorTransform::identity);
  REQUIRE(c.option_item_styles.size() == 5);
  CHECK(c.option_item_styles[0] == ItemStyle::arabic);
  CHECK(c.option_item_styles[4] == ItemStyle::roman_lower);
}

TEST_CASE("default catalog list sizes stay within 4..16 and duplicates are recorded") {
  const auto c = default_catalog();
  for (auto n : c.component_sizes(true)) {
    CHECK(n >= 4);
    CHECK(n <= 16);
  }
  CHECK(c.original_sizes.at("separator") == 15);
  CHECK(c.separators.size() == 14);
  CHECK(c.original_sizes.at("space") == 16);
  CHECK(c.spaces.size() == 13);
}

TEST_CASE("universe size of the default catalog matches the product over deduplicated printed lists") {
  std::uint64_t without = 1, with = 1;
  for (std::size_t i = 0; i < kPrintedLists.size(); ++i) {
    const std::set<std::string> distinct(kPrintedLists[i].begin(), kPrintedLists[i].end());
    if (i < 3) without *= distinct.size();
    with *= distinct.size();
  }
  const auto c = default_catalog();
  CHECK(format_universe_size(c, false) == without);
  CHECK(format_universe_size(c, true) == with);
}

TEST_CASE("toy universe sizes follow the product rule") {
  const auto c = toy_catalog();
  CHECK(format_universe_size(c, false) == 8);
  CHECK(format_universe_size(c, true) == 64);
}

TEST_CASE("catalog files: empty list is a validation error, malformed list a schema error") {
  TempDir dir("catalog");
  auto doc = catalog_to_json(default_catalog());
  doc["separator"] = nlohmann::json::array();
  std::ofstream(dir / "empty.json") << doc.dump();
  CHECK(kind_of([&] { load_catalog(dir / "empty.json"); }) == ErrorKind::validation);

  doc = catalog_to_json(default_catalog());
  doc["space"] = 42;
  std::ofstream(dir / "bad.json") << doc.dump();
  try {
    load_catalog(dir / "bad.json");
    FAIL("expected schema error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::schema);
    CHECK(std::string(e.what()).find("space") != std::string::npos);
  }

  doc = catalog_to_json(default_catalog());
  doc["option_item_wrapper"] = {"{}{}", "({})", "{}.", "{})"};
  std::ofstream(dir / "slots.json") << doc.dump();
  CHECK(kind_of([&] { load_catalog(dir / "slots.json"); }) == ErrorKind::validation);
}

TEST_CASE("catalog JSON round trip interprets escapes") {
  const auto c = default_catalog();
  const auto back = catalog_from_json(catalog_to_json(c));
  CHECK(back.separators == c.separators);
  CHECK(back.spaces == c.spaces);
  CHECK(back.text_option_separators == c.text_option_separators);
  CHECK(std::find(back.separators.begin(), back.separators.end(), " \n\t") != back.separators.end());
}

TEST_CASE("descriptor transforms") {
  CHECK(apply_transform(DescriptorTransform::title, "question text") == "Question Text");
  CHECK(apply_transform(DescriptorTransform::title, "it's o'neil") == "It'S O'Neil");
  CHECK(apply_transform(DescriptorTransform::upper, "Answer") == "ANSWER");
  CHECK(apply_transform(DescriptorTransform::lower, "Answer") == "answer");
  CHECK(apply_transform(DescriptorTransform::identity, "aNsWeR") == "aNsWeR");
}

TEST_CASE("option labels") {
  const auto c = default_catalog();
  // arabic + "{}."
  CHECK(enumerate_option_labels(c, 0, 1, 3) == std::vector<std::string>{"1.", "2.", "3."});
  // roman upper + "[{}]"
  CHECK(enumerate_option_labels(c, 3, 4, 2) == std::vector<std::string>{"[I]", "[II]"});
  // latin upper + "{})"
  CHECK(enumerate_option_labels(c, 1, 2, 3) == std::vector<std::string>{"A)", "B)", "C)"});
  CHECK(enumerate_option_labels(c, 4, 0, 4) == std::vector<std::string>{"(i)", "(ii)", "(iii)", "(iv)"});
  CHECK(kind_of([&] { enumerate_option_labels(c, 1, 0, 27); }) == ErrorKind::capacity);
  CHECK(enumerate_option_labels(c, 1, 0, 26).back() == "(Z)");
}

TEST_CASE("worked example: first-row component values") {
  const auto c = default_catalog();
  const Task t = two_option_task();
  // title, ": ", " ", " ", latin upper, "{})"
  const auto spec = FormatSpec::from_indices(std::vector<std::size_t>{0, 3, 1, 1, 1, 2});
  CHECK(render_block(t, c, spec, "Is the sky blue?", "yes") == "Question: Is the sky blue? A) yes B) no Answer: yes");
}

TEST_CASE("worked example: second-row component values") {
  const auto c = default_catalog();
  const Task t = two_option_task();
  // upper, "- ", "\n", "\t", arabic, "{}."
  REQUIRE(c.separators[12] == "- ");
  const auto spec = FormatSpec::from_indices(std::vector<std::size_t>{1, 12, 2, 3, 0, 1});
  CHECK(render_block(t, c, spec, "Is the sky blue?", "yes") == "QUESTION- Is the sky blue?\n1.\tyes\n2.\tno\nANSWER- yes");
}

TEST_CASE("identity rendering with empty separator and single-space joiner") {
  const auto c = default_catalog();
  Task t;
  t.id = "task901";
  t.instruction = "Label it.";
  t.instances = {{"u0", "some text", "good"}, {"u1", "other", "bad"}};
  const auto spec = FormatSpec::from_indices(std::vector<std::size_t>{3, 0, 1});
  const auto p = render(t, t.instances[0], {}, c, spec, RenderMode::completion);
  const std::string expected = "Label it.\n\nquestionsome text answer";
  REQUIRE(p.text.size() == expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) CHECK(p.text[i] == expected[i]);
  CHECK(p.answer_surface_forms == std::vector<std::string>{"bad", "good"});
}

TEST_CASE("demonstrations precede the test block in the same format; chat mode splits system and user") {
  const auto c = default_catalog();
  const Task t = two_option_task();
  const auto spec = FormatSpec::from_indices(std::vector<std::size_t>{1, 13, 2, 3, 0, 1});
  const std::vector<Instance> demos{t.instances[1], t.instances[2]};
  const auto p = render(t, t.instances[0], demos, c, spec, RenderMode::completion);
  const std::string b1 = render_block(t, c, spec, demos[0].input, demos[0].gold);
  const std::string b2 = render_block(t, c, spec, demos[1].input, demos[1].gold);
  const std::string test = render_block(t, c, spec, t.instances[0].input, "");
  CHECK(p.text == t.instruction + "\n\n" + b1 + "\n\n" + b2 + "\n\n" + test);
  CHECK(p.option_labels == std::vector<std::string>{"1.", "2."});

  const auto chat = render(t, t.instances[0], demos, c, spec, RenderMode::chat);
  CHECK(chat.system_text == t.instruction + "\n" + std::string(kChatAdmonition));
  CHECK(chat.user_text == b1 + "\n\n" + b2 + "\n\n" + test);
  CHECK(chat.text.empty());
}

TEST_CASE("format kind must match task kind") {
  const auto c = default_catalog();
  const Task mc = two_option_task();
  Task plain = mc;
  plain.options.reset();
  const auto three = FormatSpec::from_indices(std::vector<std::size_t>{0, 0, 0});
  const auto six = FormatSpec::from_indices(std::vector<std::size_t>{0, 0, 0, 0, 0, 0});
  CHECK(kind_of([&] { render(mc, mc.instances[0], {}, c, three, RenderMode::completion); }) == ErrorKind::render);
  CHECK(kind_of([&] { render(plain, plain.instances[0], {}, c, six, RenderMode::completion); }) ==
        ErrorKind::validation);
  CHECK(kind_of([&] { check_format(c, FormatSpec::from_indices(std::vector<std::size_t>{9, 0, 0})); }) ==
        ErrorKind::validation);
}

TEST_CASE("wrapper literal inside task text is left untouched") {
  const auto c = default_catalog();
  Task t = two_option_task();
  t.options = std::vector<std::string>{"{}", "({})"};
  t.instances = {{"u0", "which {} is it", "{}"}};
  const auto spec = FormatSpec::from_indices(std::vector<std::size_t>{0, 3, 1, 1, 1, 0});
  CHECK(render_block(t, c, spec, "which {} is it", "") == "Question: which {} is it (A) {} (B) ({}) Answer: ");
}

TEST_CASE("sampling formats") {
  const auto toy = toy_catalog();
  const auto all = sample_formats(toy, false, 8, 123);
  CHECK(std::set<FormatSpec>(all.begin(), all.end()).size() == 8);
  CHECK(kind_of([&] { sample_formats(toy, false, 9, 1); }) == ErrorKind::capacity);

  const auto c = default_catalog();
  CHECK(sample_formats(c, true, 10, 7) == sample_formats(c, true, 10, 7));
  std::size_t differing = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    if (sample_formats(c, true, 10, 2 * s + 7) != sample_formats(c, true, 10, 2 * s + 8)) ++differing;
  }
  CHECK(differing == 100);
}

TEST_CASE("format ids and fingerprints") {
  const auto c = default_catalog();
  const auto a = FormatSpec::from_indices(std::vector<std::size_t>{0, 3, 1, 1, 1, 2});
  CHECK(a.id() == "f0.3.1.1.1.2");
  CHECK(format_from_json(format_to_json(a)) == a);
  CHECK(format_fingerprint(c, a).size() == 16);
  auto b = a;
  b.space = 2;
  CHECK(format_fingerprint(c, a) != format_fingerprint(c, b));

  // Fingerprints follow component values, not indices.
  auto doc = catalog_to_json(c);
  std::reverse(doc["separator"].begin(), doc["separator"].end());
  const auto reordered = catalog_from_json(doc);
  auto moved = a;
  moved.separator = reordered.separators.size() - 1 - a.separator;
  CHECK(format_fingerprint(reordered, moved) == format_fingerprint(c, a));
}

TEST_CASE("format_at decodes every index of a toy universe exactly once") {
  const auto toy = toy_catalog();
  std::set<FormatSpec> seen;
  for (std::uint64_t i = 0; i < 64; ++i) seen.insert(format_at(toy, true, i));
  CHECK(seen.size() == 64);
}

TEST_CASE("compositional split on the minimal 2x2 grid") {
  std::vector<FormatSpec> grid;
  for (std::size_t a = 0; a < 2; ++a) {
    for (std::size_t b = 0; b < 2; ++b) grid.push_back(FormatSpec::from_indices(std::vector<std::size_t>{a, b, 0}));
  }
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto s = compositional_split(grid, seed);
    REQUIRE(s.train.size() == 2);
    REQUIRE(s.test.size() == 2);
    CHECK(fsens::testing::ref_split_ok(s.train, s.test));
    // The diagonal or the anti-diagonal ends up in test.
    const bool diag = s.test[0].descriptor_transform == s.test[0].separator;
    for (const auto& f : s.test) CHECK((f.descriptor_transform == f.separator) == diag);
  }
}

TEST_CASE("compositional split of 10 sampled default-catalog formats") {
  const auto c = default_catalog();
  const auto formats = sample_compositional_formats(c, true, 10, 3);
  REQUIRE(formats.size() == 10);
  const auto s = compositional_split(formats, 3);
  CHECK(s.train.size() + s.test.size() == 10);
  CHECK(fsens::testing::ref_split_ok(s.train, s.test));
}

TEST_CASE("compositional split rejects infeasible inputs") {
  const auto f = FormatSpec::from_indices(std::vector<std::size_t>{0, 0, 0});
  const std::vector<FormatSpec> same(4, f);
  CHECK(kind_of([&] { compositional_split(same, 1); }) == ErrorKind::split_infeasible);
  std::vector<FormatSpec> disjoint;
  for (std::size_t i = 0; i < 4; ++i) disjoint.push_back(FormatSpec::from_indices(std::vector<std::size_t>{i, i, i}));
  CHECK(kind_of([&] { compositional_split(disjoint, 1); }) == ErrorKind::split_infeasible);
  const std::vector<FormatSpec> three(3, f);
  CHECK(kind_of([&] { compositional_split(three, 1); }) != ErrorKind::undefined);
}

TEST_CASE("compositional split postconditions over 100 random draws") {
  const auto c = default_catalog();
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    const bool with_options = rng.below(2) == 1;
    const std::size_t n = 4 + rng.below(20);
    const auto formats = sample_compositional_formats(c, with_options, n, seed * 31 + 1);
    const auto s = compositional_split(formats, seed);
    CHECK(fsens::testing::ref_split_ok(s.train, s.test));
    CHECK(s.train.size() + s.test.size() == n);
  }
}

TEST_CASE("rendering is pure and differs whenever an exercised component differs") {
  const auto c = default_catalog();
  const Task t = two_option_task();
  const std::vector<Instance> demos{t.instances[1]};
  const auto base = FormatSpec::from_indices(std::vector<std::size_t>{0, 3, 1, 1, 1, 2});
  const auto p0 = render(t, t.instances[0], demos, c, base, RenderMode::completion);
  CHECK(p0 == render(t, t.instances[0], demos, c, base, RenderMode::completion));
  const auto sizes = c.component_sizes(true);
  for (std::size_t comp = 0; comp < 6; ++comp) {
    for (std::size_t v = 0; v < sizes[comp]; ++v) {
      auto idx = base.indices();
      if (idx[comp] == v) continue;
      idx[comp] = v;
      const auto p = render(t, t.instances[0], demos, c, FormatSpec::from_indices(idx), RenderMode::completion);
      CHECK_MESSAGE(p.text != p0.text, "component " << comp << " value " << v);
    }
  }
}
