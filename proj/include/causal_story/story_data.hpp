#pragma once

// Procedural story corpus.
//
// Each story has one background that persists across all frames and one or
// more characters that random-walk on a grid. Captions follow the grammar
//   [BACKGROUND] (CHARACTER ACTION ROW COL)+
// Frame 1 always names the background; later frames omit it with probability
// p_omit, so the background of a later frame is often recoverable only from
// history. Generation uses integer arithmetic only; pixels are 8-bit and map
// to [-1, 1) by v / 128 - 1, which is exact in binary floating point.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "autodiff.hpp"
#include "errors.hpp"
#include "rng.hpp"

namespace causal_story {

struct GeneratorConfig {
    int story_length = 5;
    int grid = 4;
    int n_backgrounds = 4;
    int n_characters = 4;
    int n_actions = 4;
    int max_characters = 2;
    double p_omit = 0.8;
    int caption_length = 12;
    int channels = 3;
    int height = 16;
    int width = 16;

    int cell() const { return height / grid; }
    std::size_t pixels_per_frame() const { return static_cast<std::size_t>(channels * height * width); }

    void validate() const {
        auto fail = [](const std::string& m) { throw ConfigError("data." + m); };
        if (story_length < 1) fail("story_length must be >= 1");
        if (grid < 1) fail("grid must be >= 1");
        if (n_backgrounds < 1 || n_backgrounds > 4) fail("n_backgrounds must be in [1, 4]");
        if (n_characters < 1 || n_characters > 4) fail("n_characters must be in [1, 4]");
        if (n_actions < 1) fail("n_actions must be >= 1");
        if (max_characters < 1 || max_characters > n_characters) fail("max_characters must be in [1, n_characters]");
        if (!(p_omit >= 0.0 && p_omit <= 1.0)) fail("p_omit must be in [0, 1]");
        if (channels != 3) fail("channels must be 3");
        if (height != width || height % grid != 0) fail("image must be square and divisible by grid");
        if (cell() != 4) fail("grid cells must be 4x4 pixels (height / grid == 4)");
        if (caption_length < 1 + 4 * max_characters) fail("caption_length too short for the caption grammar");
    }
};

inline constexpr int kPadToken = 0;

/// Token ids: PAD, backgrounds, characters, actions, rows, columns.
struct Vocabulary {
    std::vector<std::string> words;
    int background_base = 1;
    int character_base = 0;
    int action_base = 0;
    int row_base = 0;
    int col_base = 0;

    int size() const { return static_cast<int>(words.size()); }
    bool is_background(int id) const { return id >= background_base && id < character_base; }
    int id_of(const std::string& w) const {
        for (int i = 0; i < size(); ++i)
            if (words[static_cast<std::size_t>(i)] == w) return i;
        return -1;
    }
};

inline Vocabulary make_vocabulary(const GeneratorConfig& cfg) {
    static const std::array<const char*, 4> backgrounds{"snow", "forest", "beach", "night"};
    static const std::array<const char*, 4> characters{"fox", "owl", "bear", "frog"};
    Vocabulary v;
    v.words.push_back("<pad>");
    v.background_base = v.size();
    for (int i = 0; i < cfg.n_backgrounds; ++i) v.words.emplace_back(backgrounds[static_cast<std::size_t>(i)]);
    v.character_base = v.size();
    for (int i = 0; i < cfg.n_characters; ++i) v.words.emplace_back(characters[static_cast<std::size_t>(i)]);
    v.action_base = v.size();
    for (int i = 0; i < cfg.n_actions; ++i) v.words.push_back("act" + std::to_string(i));
    v.row_base = v.size();
    for (int i = 0; i < cfg.grid; ++i) v.words.push_back("row" + std::to_string(i));
    v.col_base = v.size();
    for (int i = 0; i < cfg.grid; ++i) v.words.push_back("col" + std::to_string(i));
    return v;
}

struct CharacterState {
    int id = 0;
    int action = 0;
    int row = 0;
    int col = 0;
    bool operator==(const CharacterState&) const = default;
};

struct FrameScene {
    std::vector<CharacterState> characters;  // sorted by id
    bool operator==(const FrameScene&) const = default;
};

struct SceneMeta {
    int background = 0;
    std::vector<FrameScene> frames;
    bool operator==(const SceneMeta&) const = default;
};

using Caption = std::vector<int>;
using Pixels = std::vector<std::uint8_t>;  // C x H x W, 8-bit

struct StoryRecord {
    std::uint64_t story_id = 0;
    SceneMeta scene;
    std::vector<Caption> captions;
    std::vector<Pixels> frames;
    bool operator==(const StoryRecord&) const = default;
};

// ---------------------------------------------------------------------------
// Rendering

using Rgb = std::array<std::uint8_t, 3>;

inline Rgb background_color(int id) {
    static const std::array<Rgb, 4> palette{Rgb{224, 224, 224}, Rgb{32, 160, 64}, Rgb{224, 192, 96}, Rgb{32, 32, 128}};
    return palette.at(static_cast<std::size_t>(id));
}

inline Rgb character_color(int id) {
    static const std::array<Rgb, 4> palette{Rgb{224, 32, 32}, Rgb{240, 224, 32}, Rgb{200, 40, 200}, Rgb{32, 208, 208}};
    return palette.at(static_cast<std::size_t>(id));
}

inline constexpr Rgb kGlyphShadow{0, 0, 0};

/// 4x4 glyph bitmaps, row-major, MSB = top-left.
inline std::uint16_t glyph_bits(int id) {
    static const std::array<std::uint16_t, 4> glyphs{0b0110'1111'1111'0110, 0b1001'0110'0110'1001,
                                                     0b1111'1001'1001'1111, 0b0100'1110'0100'0100};
    return glyphs.at(static_cast<std::size_t>(id));
}

inline double pixel_to_unit(std::uint8_t v) { return static_cast<double>(v) / 128.0 - 1.0; }

inline std::uint8_t unit_to_pixel(double x) {
    const double v = std::round((x + 1.0) * 128.0);
    return static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
}

/// Paints the background and then every character's glyph into its grid cell.
/// Characters are drawn highest id first, so the lowest id ends up on top.
inline Pixels render_frame(int background, const FrameScene& scene, const GeneratorConfig& cfg) {
    const int h = cfg.height, w = cfg.width, cell = cfg.cell();
    Pixels px(cfg.pixels_per_frame());
    const Rgb bg = background_color(background);
    for (int c = 0; c < 3; ++c)
        std::fill_n(px.begin() + c * h * w, h * w, bg[static_cast<std::size_t>(c)]);
    auto order = scene.characters;
    std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a.id > b.id; });
    for (const auto& ch : order) {
        if (ch.row < 0 || ch.row >= cfg.grid || ch.col < 0 || ch.col >= cfg.grid)
            throw ContractError("character position outside grid");
        const std::uint16_t bits = glyph_bits(ch.id);
        const Rgb on = character_color(ch.id);
        for (int y = 0; y < cell; ++y)
            for (int x = 0; x < cell; ++x) {
                const bool lit = (bits >> (15 - (y * 4 + x))) & 1u;
                const Rgb& col = lit ? on : kGlyphShadow;
                const int py = ch.row * cell + y, pxl = ch.col * cell + x;
                for (int c = 0; c < 3; ++c) px[static_cast<std::size_t>((c * h + py) * w + pxl)] = col[static_cast<std::size_t>(c)];
            }
    }
    return px;
}

/// Frame as a [C, H, W] tensor in [-1, 1).
inline Tensor frame_tensor(const Pixels& px, const GeneratorConfig& cfg) {
    std::vector<double> v(px.size());
    for (std::size_t i = 0; i < px.size(); ++i) v[i] = pixel_to_unit(px[i]);
    return Tensor({static_cast<std::size_t>(cfg.channels), static_cast<std::size_t>(cfg.height),
                   static_cast<std::size_t>(cfg.width)},
                  std::move(v));
}

inline Pixels tensor_pixels(const Tensor& t) {
    Pixels px(t.size());
    for (std::size_t i = 0; i < px.size(); ++i) px[i] = unit_to_pixel(t[i]);
    return px;
}

// ---------------------------------------------------------------------------
// Generation

inline Caption make_caption(const Vocabulary& vocab, const GeneratorConfig& cfg, int background, bool with_background,
                            const FrameScene& scene) {
    Caption c;
    if (with_background) c.push_back(vocab.background_base + background);
    for (const auto& ch : scene.characters) {
        c.push_back(vocab.character_base + ch.id);
        c.push_back(vocab.action_base + ch.action);
        c.push_back(vocab.row_base + ch.row);
        c.push_back(vocab.col_base + ch.col);
    }
    c.resize(static_cast<std::size_t>(cfg.caption_length), kPadToken);
    return c;
}

inline StoryRecord generate_story(std::uint64_t seed, const GeneratorConfig& cfg, std::uint64_t story_id = 0) {
    cfg.validate();
    const Vocabulary vocab = make_vocabulary(cfg);
    Rng rng(seed);
    StoryRecord rec;
    rec.story_id = story_id;
    rec.scene.background = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.n_backgrounds)));

    std::vector<int> ids(static_cast<std::size_t>(cfg.n_characters));
    for (int i = 0; i < cfg.n_characters; ++i) ids[static_cast<std::size_t>(i)] = i;
    for (std::size_t i = ids.size(); i > 1; --i) std::swap(ids[i - 1], ids[rng.below(i)]);
    const auto n_chars = static_cast<std::size_t>(1 + rng.below(static_cast<std::uint64_t>(cfg.max_characters)));
    ids.resize(n_chars);
    std::sort(ids.begin(), ids.end());

    FrameScene state;
    for (int id : ids) {
        CharacterState ch;
        ch.id = id;
        ch.row = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.grid)));
        ch.col = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.grid)));
        state.characters.push_back(ch);
    }

    const auto omit_threshold = static_cast<std::uint64_t>(std::llround(cfg.p_omit * 10000.0));
    std::vector<bool> with_bg(static_cast<std::size_t>(cfg.story_length), true);
    for (int t = 0; t < cfg.story_length; ++t) {
        if (t > 0) {
            for (auto& ch : state.characters) {
                switch (rng.below(5)) {
                    case 1: ch.row = std::max(0, ch.row - 1); break;
                    case 2: ch.row = std::min(cfg.grid - 1, ch.row + 1); break;
                    case 3: ch.col = std::max(0, ch.col - 1); break;
                    case 4: ch.col = std::min(cfg.grid - 1, ch.col + 1); break;
                    default: break;
                }
            }
            with_bg[static_cast<std::size_t>(t)] = rng.below(10000) >= omit_threshold;
        }
        for (auto& ch : state.characters) ch.action = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.n_actions)));
        rec.scene.frames.push_back(state);
    }
    // Guarantee a causal gap: some frame >= 3 must rely on history for the background.
    if (cfg.story_length >= 3 && omit_threshold > 0) {
        bool gap = false;
        for (int t = 2; t < cfg.story_length; ++t) gap = gap || !with_bg[static_cast<std::size_t>(t)];
        if (!gap) with_bg.back() = false;
    }
    for (int t = 0; t < cfg.story_length; ++t) {
        const auto& fs = rec.scene.frames[static_cast<std::size_t>(t)];
        rec.captions.push_back(make_caption(vocab, cfg, rec.scene.background, with_bg[static_cast<std::size_t>(t)], fs));
        rec.frames.push_back(render_frame(rec.scene.background, fs, cfg));
    }
    return rec;
}

/// Story i of a corpus uses sub-seed derive_seed(root, "story", i).
inline std::vector<StoryRecord> generate_corpus(std::uint64_t root_seed, std::size_t count, const GeneratorConfig& cfg) {
    std::vector<StoryRecord> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(generate_story(derive_seed(root_seed, "story", i), cfg, i));
    return out;
}

// ---------------------------------------------------------------------------
// Dataset file: line 1 is a JSON header, each following line one JSON record.

inline constexpr int kDatasetVersion = 1;
inline constexpr const char* kDatasetFormat = "causal-story-dataset";

struct Dataset {
    GeneratorConfig config;
    Vocabulary vocab;
    std::vector<StoryRecord> records;
};

inline nlohmann::json generator_to_json(const GeneratorConfig& c) {
    return {{"story_length", c.story_length}, {"grid", c.grid},           {"n_backgrounds", c.n_backgrounds},
            {"n_characters", c.n_characters}, {"n_actions", c.n_actions}, {"max_characters", c.max_characters},
            {"p_omit", c.p_omit},             {"caption_length", c.caption_length}};
}

inline nlohmann::json record_to_json(const StoryRecord& r) {
    nlohmann::json scene = nlohmann::json::array();
    for (const auto& f : r.scene.frames) {
        nlohmann::json chars = nlohmann::json::array();
        for (const auto& c : f.characters) chars.push_back({c.id, c.action, c.row, c.col});
        scene.push_back(chars);
    }
    return {{"id", r.story_id},
            {"background", r.scene.background},
            {"scene", scene},
            {"captions", r.captions},
            {"frames", r.frames}};
}

inline void write_dataset(const std::string& path, const Dataset& ds) {
    if (ds.records.empty()) throw ContractError("write_dataset: no records");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open " + path + " for writing");
    nlohmann::json header = {{"format", kDatasetFormat},
                             {"version", kDatasetVersion},
                             {"vocab", ds.vocab.words},
                             {"image_shape", {ds.config.channels, ds.config.height, ds.config.width}},
                             {"story_length", ds.config.story_length},
                             {"caption_length", ds.config.caption_length},
                             {"count", ds.records.size()},
                             {"generator", generator_to_json(ds.config)}};
    os << header.dump() << '\n';
    for (const auto& r : ds.records) os << record_to_json(r).dump() << '\n';
    if (!os) throw DataError("write failed: " + path);
}

namespace detail {

template <class T>
T json_get(const nlohmann::json& j, const char* key, std::size_t line) {
    if (!j.is_object() || !j.contains(key))
        throw DataError("line " + std::to_string(line) + ": missing field '" + key + "'");
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError("line " + std::to_string(line) + ": field '" + key + "' has wrong type");
    }
}

}  // namespace detail

inline Dataset read_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open dataset " + path);
    Dataset ds;
    std::string line;
    std::size_t lineno = 1;
    if (!std::getline(is, line)) throw DataError("line 1: empty dataset file " + path);
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception&) {
        throw DataError("line 1: malformed header");
    }
    if (detail::json_get<std::string>(header, "format", 1) != kDatasetFormat) throw DataError("line 1: not a story dataset");
    const int version = detail::json_get<int>(header, "version", 1);
    if (version != kDatasetVersion)
        throw DataError("line 1: dataset version " + std::to_string(version) + " unsupported (expected " +
                        std::to_string(kDatasetVersion) + ")");
    ds.vocab.words = detail::json_get<std::vector<std::string>>(header, "vocab", 1);
    const auto gen = detail::json_get<nlohmann::json>(header, "generator", 1);
    auto& c = ds.config;
    c.story_length = detail::json_get<int>(gen, "story_length", 1);
    c.grid = detail::json_get<int>(gen, "grid", 1);
    c.n_backgrounds = detail::json_get<int>(gen, "n_backgrounds", 1);
    c.n_characters = detail::json_get<int>(gen, "n_characters", 1);
    c.n_actions = detail::json_get<int>(gen, "n_actions", 1);
    c.max_characters = detail::json_get<int>(gen, "max_characters", 1);
    c.p_omit = detail::json_get<double>(gen, "p_omit", 1);
    c.caption_length = detail::json_get<int>(gen, "caption_length", 1);
    const auto shape = detail::json_get<std::vector<int>>(header, "image_shape", 1);
    if (shape.size() != 3) throw DataError("line 1: image_shape must have 3 entries");
    c.channels = shape[0];
    c.height = shape[1];
    c.width = shape[2];
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw DataError(std::string("line 1: ") + e.what());
    }
    const Vocabulary expected = make_vocabulary(c);
    if (expected.words != ds.vocab.words) throw DataError("line 1: vocabulary does not match generator config");
    ds.vocab = expected;
    const auto count = detail::json_get<std::size_t>(header, "count", 1);

    const int vocab_size = ds.vocab.size();
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception&) {
            throw DataError("line " + std::to_string(lineno) + ": malformed record");
        }
        StoryRecord r;
        r.story_id = detail::json_get<std::uint64_t>(j, "id", lineno);
        r.scene.background = detail::json_get<int>(j, "background", lineno);
        if (r.scene.background < 0 || r.scene.background >= c.n_backgrounds)
            throw DataError("line " + std::to_string(lineno) + ": background id out of range");
        const auto scene = detail::json_get<std::vector<std::vector<std::array<int, 4>>>>(j, "scene", lineno);
        for (const auto& f : scene) {
            FrameScene fs;
            for (const auto& a : f) {
                if (a[0] < 0 || a[0] >= c.n_characters || a[1] < 0 || a[1] >= c.n_actions || a[2] < 0 || a[2] >= c.grid ||
                    a[3] < 0 || a[3] >= c.grid)
                    throw DataError("line " + std::to_string(lineno) + ": scene entry out of range");
                fs.characters.push_back({a[0], a[1], a[2], a[3]});
            }
            r.scene.frames.push_back(std::move(fs));
        }
        r.captions = detail::json_get<std::vector<Caption>>(j, "captions", lineno);
        for (const auto& f : detail::json_get<std::vector<std::vector<int>>>(j, "frames", lineno)) {
            Pixels px(f.size());
            for (std::size_t i = 0; i < f.size(); ++i) {
                if (f[i] < 0 || f[i] > 255)
                    throw DataError("line " + std::to_string(lineno) + ": pixel value " + std::to_string(f[i]) + " outside [0, 255]");
                px[i] = static_cast<std::uint8_t>(f[i]);
            }
            r.frames.push_back(std::move(px));
        }
        const auto L = static_cast<std::size_t>(c.story_length);
        if (r.scene.frames.size() != L || r.captions.size() != L || r.frames.size() != L)
            throw DataError("line " + std::to_string(lineno) + ": story length differs from header");
        for (const auto& cap : r.captions) {
            if (cap.size() != static_cast<std::size_t>(c.caption_length))
                throw DataError("line " + std::to_string(lineno) + ": caption length differs from header");
            for (int tok : cap)
                if (tok < 0 || tok >= vocab_size)
                    throw DataError("line " + std::to_string(lineno) + ": token " + std::to_string(tok) + " not in vocabulary");
        }
        for (const auto& f : r.frames)
            if (f.size() != c.pixels_per_frame())
                throw DataError("line " + std::to_string(lineno) + ": frame has " + std::to_string(f.size()) + " pixels");
        ds.records.push_back(std::move(r));
    }
    if (ds.records.size() != count)
        throw DataError("line " + std::to_string(lineno + 1) + ": truncated dataset, header declares " +
                        std::to_string(count) + " records, found " + std::to_string(ds.records.size()));
    return ds;
}

}  // namespace causal_story
