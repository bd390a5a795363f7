#include "decomp/eval.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "json.hpp"

#include "decomp/image_io.hpp"

namespace decomp {

using json = nlohmann::json;

// ---- palette ----

Palette::Palette() {
    ColorClass red{{0.85, 0.12, 0.10}, {0.5, 0.0, 0.0}, {1.0, 0.4, 0.4}};
    ColorClass blue{{0.12, 0.18, 0.85}, {0.0, 0.0, 0.5}, {0.4, 0.4, 1.0}};
    ColorClass green{{0.42, 0.55, 0.40}, {0.3, 0.45, 0.3}, {0.55, 0.7, 0.52}};
    for (auto w : {"red", "square"}) add(w, red);
    for (auto w : {"blue", "disc", "circle"}) add(w, blue);
    add("green", green);
}

void Palette::add(std::string word, ColorClass cls) { classes_[std::move(word)] = cls; }

const ColorClass* Palette::find(std::string_view word) const {
    auto it = classes_.find(word);
    return it == classes_.end() ? nullptr : &it->second;
}

const ColorClass& Palette::at(std::string_view word) const {
    if (auto* c = find(word)) return *c;
    throw UnknownClass("no color class for '" + std::string(word) + "'");
}

// ---- toy embedder ----

namespace {

void check_image(const Tensor& image, const char* who) {
    if (image.rank() != 3 || image.dim(0) != 3)
        throw ShapeError(std::string(who) + ": expected [3,H,W], got " + shape_str(image.shape()));
}

void normalize(std::vector<double>& v) {
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    if (n == 0.0) throw std::domain_error("cannot normalize a zero vector");
    for (double& x : v) x /= n;
}

std::vector<std::string> words_of(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : text) {
        if (std::isalnum(static_cast<unsigned char>(c))) {
            cur += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

Tensor uniform_image(const std::array<double, 3>& c, std::size_t side) {
    Tensor t({3, side, side});
    for (std::size_t ch = 0; ch < 3; ++ch)
        for (std::size_t i = 0; i < side * side; ++i) t[ch * side * side + i] = c[ch];
    return t;
}

}  // namespace

std::vector<double> ToyEmbedder::embed_image(const Tensor& image) const {
    check_image(image, "embed_image");
    const std::size_t h = image.dim(1), w = image.dim(2), plane = h * w;
    std::vector<double> f(dim, 0.0);
    auto lit = [&](std::size_t i) { return image[i] > 0.0 || image[plane + i] > 0.0 || image[2 * plane + i] > 0.0; };

    std::size_t count = 0;
    double weights[bins];
    for (std::size_t i = 0; i < plane; ++i) {
        if (!lit(i)) continue;
        ++count;
        for (std::size_t ch = 0; ch < 3; ++ch) {
            double x = image[ch * plane + i], total = 0.0;
            for (std::size_t b = 0; b < bins; ++b) {
                double d = (x - (b + 0.5) / bins) / bin_sigma;
                weights[b] = std::exp(-0.5 * d * d);
                total += weights[b];
            }
            for (std::size_t b = 0; b < bins; ++b) f[ch * bins + b] += weights[b] / total;
        }
    }
    if (count == 0) {
        f[dim - 1] = 1.0;
        return f;
    }
    for (std::size_t k = 0; k < 3 * bins; ++k) f[k] /= static_cast<double>(count);

    auto lum = [&](std::size_t i) { return 0.299 * image[i] + 0.587 * image[plane + i] + 0.114 * image[2 * plane + i]; };
    std::size_t patches = 0;
    double mean_sum = 0.0, sd_sum = 0.0;
    for (std::size_t y = 0; y + 1 < h; y += 2)
        for (std::size_t x = 0; x + 1 < w; x += 2) {
            std::size_t idx[4] = {y * w + x, y * w + x + 1, (y + 1) * w + x, (y + 1) * w + x + 1};
            if (!(lit(idx[0]) && lit(idx[1]) && lit(idx[2]) && lit(idx[3]))) continue;
            double l[4], m = 0.0, v = 0.0;
            for (int k = 0; k < 4; ++k) m += (l[k] = lum(idx[k])) / 4.0;
            for (int k = 0; k < 4; ++k) v += (l[k] - m) * (l[k] - m) / 4.0;
            mean_sum += m;
            sd_sum += std::sqrt(v);
            ++patches;
        }
    if (patches > 0) {
        f[3 * bins] = mean_sum / patches;
        f[3 * bins + 1] = sd_sum / patches;
    }
    normalize(f);
    return f;
}

std::vector<double> ToyEmbedder::embed_text(std::string_view text) const {
    std::vector<double> f(dim, 0.0);
    bool any = false;
    for (const auto& word : words_of(text)) {
        const ColorClass* c = palette_.find(word);
        if (!c) continue;
        auto g = embed_image(uniform_image(c->color, 2));
        for (std::size_t k = 0; k < dim; ++k) f[k] += g[k];
        any = true;
    }
    if (!any) {
        f[dim - 1] = 1.0;
        return f;
    }
    normalize(f);
    return f;
}

Tensor ColorThresholdSegmenter::segment(const Tensor& image, std::string_view class_word) const {
    check_image(image, "segment");
    const ColorClass& c = palette_.at(class_word);
    const std::size_t h = image.dim(1), w = image.dim(2), plane = h * w;
    Tensor m({h, w});
    for (std::size_t i = 0; i < plane; ++i) {
        bool in = true;
        for (std::size_t ch = 0; ch < 3 && in; ++ch) {
            double v = image[ch * plane + i];
            in = v >= c.lo[ch] && v <= c.hi[ch];
        }
        m[i] = in ? 1.0 : 0.0;
    }
    return m;
}

// ---- metrics ----

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw ShapeError("cosine: dimension mismatch");
    double d = std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
    return std::clamp(d, -1.0, 1.0);
}

double prompt_similarity(const Tensor& image, std::string_view class_prompt, const Embedder& embedder) {
    return cosine(embedder.embed_image(image), embedder.embed_text(class_prompt));
}

Tensor apply_mask(const Tensor& image, const Tensor& mask) {
    check_image(image, "apply_mask");
    if (mask.rank() != 2 || mask.dim(0) != image.dim(1) || mask.dim(1) != image.dim(2))
        throw ShapeError("apply_mask: mask " + shape_str(mask.shape()) + " vs image " + shape_str(image.shape()));
    Tensor out = image;
    const std::size_t plane = mask.numel();
    for (std::size_t ch = 0; ch < 3; ++ch)
        for (std::size_t i = 0; i < plane; ++i)
            if (mask[i] == 0.0) out[ch * plane + i] = 0.0;
    return out;
}

double mask_fraction(const Tensor& mask) {
    double on = 0.0;
    for (double v : mask.data()) on += v != 0.0 ? 1.0 : 0.0;
    return on / static_cast<double>(mask.numel());
}

double identity_similarity(const Tensor& input_image, const Tensor& input_mask, const Tensor& gen_image,
                           std::string_view class_word, const Segmenter& segmenter, const Embedder& embedder) {
    if (mask_fraction(input_mask) == 0.0) throw std::invalid_argument("identity_similarity: input mask is empty");
    Tensor gen_mask = segmenter.segment(gen_image, class_word);
    if (mask_fraction(gen_mask) == 0.0)
        throw EmptySegmentation("segmenter found no '" + std::string(class_word) + "' in the generated image");
    return cosine(embedder.embed_image(apply_mask(input_image, input_mask)),
                  embedder.embed_image(apply_mask(gen_image, gen_mask)));
}

// ---- suite ----

const std::vector<std::string>& default_templates() {
    static const std::vector<std::string> t{
        "a photo of {tokens} at the beach",
        "a photo of {tokens} in the jungle",
        "a photo of {tokens} in the snow",
        "a photo of {tokens} in the street",
        "a photo of {tokens} on top of a pink fabric",
        "a photo of {tokens} on top of a wooden floor",
        "a photo of {tokens} with a city in the background",
        "a photo of {tokens} with a mountain in the background",
        "a photo of {tokens} with the eiffel tower in the background",
        "a photo of {tokens} floating on top of water",
    };
    return t;
}

std::string concept_handle(std::size_t i) { return "[v" + std::to_string(i + 1) + "]"; }

namespace {

std::string fill_template(const std::string& tmpl, const std::string& tokens) {
    static const std::string key = "{tokens}";
    auto pos = tmpl.find(key);
    if (pos == std::string::npos) throw std::invalid_argument("template has no {tokens}: " + tmpl);
    std::string out = tmpl;
    out.replace(pos, key.size(), tokens);
    return out;
}

std::string join_and(const std::vector<std::string>& parts) {
    std::string s;
    for (std::size_t i = 0; i < parts.size(); ++i) s += (i ? " and " : "") + parts[i];
    return s;
}

}  // namespace

std::vector<EvalPair> build_eval_suite(const std::vector<NamedScene>& scenes, const std::vector<std::string>& templates) {
    std::vector<EvalPair> out;
    for (std::size_t s = 0; s < scenes.size(); ++s) {
        const Scene& sc = scenes[s].scene;
        const std::size_t n = sc.size();
        if (n >= 32) throw std::invalid_argument("build_eval_suite: too many concepts in scene " + scenes[s].id);
        for (const auto& tmpl : templates)
            for (std::uint32_t bits = 1; bits < (1u << n); ++bits) {
                EvalPair p;
                p.id = out.size();
                p.scene = s;
                p.scene_id = scenes[s].id;
                p.template_text = tmpl;
                std::vector<std::string> handles, classes;
                for (std::size_t i = 0; i < n; ++i)
                    if (bits & (1u << i)) {
                        p.subset.push_back(i);
                        handles.push_back(concept_handle(i));
                        classes.push_back("a " + sc.names.at(i));
                    }
                p.handle_prompt = fill_template(tmpl, join_and(handles));
                p.class_prompt = fill_template(tmpl, join_and(classes));
                out.push_back(std::move(p));
            }
    }
    return out;
}

// ---- run evaluation ----

EvalSummary summarize(const std::vector<PairResult>& results) {
    EvalSummary s;
    s.pairs = results.size();
    double ps = 0.0, id = 0.0;
    std::size_t nps = 0, nid = 0;
    for (const auto& r : results) {
        if (!r.error.empty()) ++s.errors;
        s.empty_segmentations += r.empty_segmentations;
        if (r.prompt_similarity) ps += *r.prompt_similarity, ++nps;
        if (r.identity_mean) id += *r.identity_mean, ++nid;
        if (r.error.empty()) ++s.scored;
    }
    if (nps) s.mean_prompt_similarity = ps / nps;
    if (nid) s.mean_identity_similarity = id / nid;
    return s;
}

EvalReport evaluate_run(const Model& model, const Scene& scene, const std::vector<EvalPair>& suite,
                        const Embedder& embedder, const Segmenter& segmenter, const SamplerConfig& sampler) {
    EvalReport report;
    for (const EvalPair& pair : suite) {
        PairResult r;
        r.pair = pair;
        try {
            Tensor gen = sample(model, pair.handle_prompt, sampler.steps, sampler.seed + pair.id);
            r.prompt_similarity = prompt_similarity(gen, pair.class_prompt, embedder);
            double sum = 0.0;
            for (std::size_t i : pair.subset) {
                try {
                    double v = identity_similarity(scene.image, scene.masks.at(i), gen, scene.names.at(i),
                                                   segmenter, embedder);
                    r.identity.push_back(v);
                    sum += v;
                } catch (const EmptySegmentation&) {
                    r.identity.push_back(std::nullopt);
                    ++r.empty_segmentations;
                }
            }
            if (!pair.subset.empty()) r.identity_mean = sum / static_cast<double>(pair.subset.size());
        } catch (const std::exception& e) {
            r.error = e.what();
        }
        report.results.push_back(std::move(r));
    }
    report.summary = summarize(report.results);
    return report;
}

namespace {

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

void write_report_jsonl(std::ostream& out, const EvalReport& report) {
    for (const auto& r : report.results) {
        json ids = json::array();
        for (const auto& v : r.identity) ids.push_back(opt(v));
        json j = {
            {"id", r.pair.id},
            {"scene", r.pair.scene_id},
            {"template", r.pair.template_text},
            {"subset", r.pair.subset},
            {"handle_prompt", r.pair.handle_prompt},
            {"class_prompt", r.pair.class_prompt},
            {"prompt_similarity", opt(r.prompt_similarity)},
            {"identity", ids},
            {"identity_mean", opt(r.identity_mean)},
            {"empty_segmentations", r.empty_segmentations},
            {"error", r.error},
        };
        out << j.dump() << '\n';
    }
}

void write_summary_table(std::ostream& out, const EvalSummary& s) {
    auto fmt = [](const std::optional<double>& v) {
        if (!v) return std::string("undefined");
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.6f", *v);
        return std::string(buf);
    };
    char line[128];
    auto row = [&](const char* k, const std::string& v) {
        std::snprintf(line, sizeof line, "%-26s %s\n", k, v.c_str());
        out << line;
    };
    row("metric", "value");
    row("pairs", std::to_string(s.pairs));
    row("scored", std::to_string(s.scored));
    row("errors", std::to_string(s.errors));
    row("empty_segmentations", std::to_string(s.empty_segmentations));
    row("mean_prompt_similarity", fmt(s.mean_prompt_similarity));
    row("mean_identity_similarity", fmt(s.mean_identity_similarity));
}

// ---- harvesting ----

Tensor decode_rle(const std::vector<std::uint32_t>& counts, std::size_t height, std::size_t width) {
    Tensor m({height, width});
    std::size_t k = 0;
    const std::size_t total = height * width;
    for (std::size_t r = 0; r < counts.size(); ++r) {
        if (counts[r] > total - k) throw HarvestError("RLE counts exceed the mask size");
        if (r % 2 == 1)
            for (std::size_t j = k; j < k + counts[r]; ++j) m[(j % height) * width + j / height] = 1.0;
        k += counts[r];
    }
    if (k != total) throw HarvestError("RLE counts do not cover the mask");
    return m;
}

std::vector<std::uint32_t> decode_rle_string(std::string_view s) {
    std::vector<std::uint32_t> counts;
    std::size_t p = 0;
    while (p < s.size()) {
        long long x = 0;
        int k = 0;
        bool more = true;
        while (more) {
            if (p >= s.size()) throw HarvestError("truncated compressed RLE");
            long long c = static_cast<long long>(s[p]) - 48;
            x |= (c & 0x1f) << (5 * k);
            more = (c & 0x20) != 0;
            ++p;
            ++k;
            if (!more && (c & 0x10)) x |= -1LL << (5 * k);
        }
        if (counts.size() > 2) x += counts[counts.size() - 2];
        if (x < 0) throw HarvestError("negative run in compressed RLE");
        counts.push_back(static_cast<std::uint32_t>(x));
    }
    return counts;
}

Tensor rasterize_polygons(const std::vector<std::vector<double>>& polygons, std::size_t height, std::size_t width) {
    Tensor m({height, width});
    std::vector<double> xs;
    for (const auto& poly : polygons) {
        if (poly.size() < 6 || poly.size() % 2) throw HarvestError("polygon needs at least 3 (x,y) points");
        const std::size_t n = poly.size() / 2;
        for (std::size_t y = 0; y < height; ++y) {
            const double cy = y + 0.5;
            xs.clear();
            for (std::size_t i = 0; i < n; ++i) {
                double x0 = poly[2 * i], y0 = poly[2 * i + 1];
                double x1 = poly[2 * ((i + 1) % n)], y1 = poly[2 * ((i + 1) % n) + 1];
                if ((y0 <= cy) != (y1 <= cy)) xs.push_back(x0 + (cy - y0) * (x1 - x0) / (y1 - y0));
            }
            std::sort(xs.begin(), xs.end());
            for (std::size_t i = 0; i + 1 < xs.size(); i += 2)
                for (std::size_t x = 0; x < width; ++x) {
                    double cx = x + 0.5;
                    if (cx >= xs[i] && cx < xs[i + 1]) m[y * width + x] = 1.0;
                }
        }
    }
    return m;
}

Tensor resize_area(const Tensor& t, std::size_t out_h, std::size_t out_w) {
    const bool planar = t.rank() == 3;
    if (!planar && t.rank() != 2) throw ShapeError("resize_area: expected rank 2 or 3, got " + shape_str(t.shape()));
    const std::size_t c = planar ? t.dim(0) : 1, h = t.dim(planar ? 1 : 0), w = t.dim(planar ? 2 : 1);
    // weights[o][i]: overlap of output cell o with input cell i, normalized.
    auto weights = [](std::size_t in, std::size_t out) {
        std::vector<std::vector<std::pair<std::size_t, double>>> wt(out);
        const double scale = static_cast<double>(in) / out;
        for (std::size_t o = 0; o < out; ++o) {
            double a = o * scale, b = (o + 1) * scale;
            for (auto i = static_cast<std::size_t>(a); i < in && i < b; ++i) {
                double ov = std::min<double>(b, i + 1) - std::max<double>(a, i);
                if (ov > 0) wt[o].push_back({i, ov / scale});
            }
        }
        return wt;
    };
    auto wy = weights(h, out_h), wx = weights(w, out_w);
    Tensor out(planar ? Shape{c, out_h, out_w} : Shape{out_h, out_w});
    std::vector<double> row(w);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t oy = 0; oy < out_h; ++oy) {
            std::fill(row.begin(), row.end(), 0.0);
            for (auto [iy, a] : wy[oy])
                for (std::size_t x = 0; x < w; ++x) row[x] += a * t[(ch * h + iy) * w + x];
            for (std::size_t ox = 0; ox < out_w; ++ox) {
                double v = 0.0;
                for (auto [ix, b] : wx[ox]) v += b * row[ix];
                out[(ch * out_h + oy) * out_w + ox] = v;
            }
        }
    return out;
}

namespace {

struct Category {
    std::string name;
    bool isthing = true;
};

struct Segment {
    Tensor crop;  // [side, side]
    double fraction;
};

const json& need(const json& j, const char* key, const std::string& where) {
    if (!j.is_object() || !j.contains(key)) throw HarvestError(where + ": missing '" + key + "'");
    return j.at(key);
}

Tensor crop_square(const Tensor& m, std::size_t x0, std::size_t y0, std::size_t side) {
    const bool planar = m.rank() == 3;
    const std::size_t c = planar ? m.dim(0) : 1, h = m.dim(planar ? 1 : 0), w = m.dim(planar ? 2 : 1);
    Tensor out(planar ? Shape{c, side, side} : Shape{side, side});
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < side; ++y)
            for (std::size_t x = 0; x < side; ++x) out[(ch * side + y) * side + x] = m[(ch * h + y + y0) * w + x + x0];
    return out;
}

Tensor annotation_mask(const json& ann, std::size_t h, std::size_t w, const std::string& where) {
    const json& seg = need(ann, "segmentation", where);
    try {
        if (seg.is_array()) return rasterize_polygons(seg.get<std::vector<std::vector<double>>>(), h, w);
        const json& counts = need(seg, "counts", where);
        if (counts.is_string()) return decode_rle(decode_rle_string(counts.get<std::string>()), h, w);
        return decode_rle(counts.get<std::vector<std::uint32_t>>(), h, w);
    } catch (const json::exception& e) {
        throw HarvestError(where + ": bad segmentation: " + e.what());
    } catch (const HarvestError& e) {
        throw HarvestError(where + ": " + e.what());
    }
}

}  // namespace

std::vector<HarvestedScene> harvest_scenes(const std::filesystem::path& annotations, const HarvestOptions& opts) {
    std::ifstream in(annotations);
    if (!in) throw HarvestError("cannot open annotation file " + annotations.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        throw HarvestError(annotations.string() + ": parse error at byte " + std::to_string(e.byte) + ": " + e.what());
    }
    const std::string file = annotations.filename().string();

    std::map<long long, Category> cats;
    for (const auto& c : need(doc, "categories", file)) {
        Category cat{need(c, "name", file + ": category").get<std::string>(), c.value("isthing", 1) != 0};
        cats[need(c, "id", file + ": category").get<long long>()] = cat;
    }
    struct ImageInfo {
        std::string file_name;
        std::size_t width, height;
    };
    std::map<long long, ImageInfo> images;
    std::vector<long long> order;
    for (const auto& im : need(doc, "images", file)) {
        std::string where = file + ": image";
        long long id = need(im, "id", where).get<long long>();
        images[id] = {need(im, "file_name", where).get<std::string>(), need(im, "width", where).get<std::size_t>(),
                      need(im, "height", where).get<std::size_t>()};
        order.push_back(id);
    }

    const json& anns = need(doc, "annotations", file);
    const bool panoptic = !anns.empty() && anns.front().contains("segments_info");
    // image id -> (category id, full-size mask)
    std::map<long long, std::vector<std::pair<long long, Tensor>>> segs;
    for (std::size_t k = 0; k < anns.size(); ++k) {
        const json& a = anns[k];
        std::string where = file + ": annotation " + std::to_string(k);
        long long image_id = need(a, "image_id", where).get<long long>();
        auto im = images.find(image_id);
        if (im == images.end()) throw HarvestError(where + ": unknown image_id " + std::to_string(image_id));
        const std::size_t h = im->second.height, w = im->second.width;
        if (!panoptic) {
            if (a.value("iscrowd", 0) != 0) continue;
            segs[image_id].push_back({need(a, "category_id", where).get<long long>(), annotation_mask(a, h, w, where)});
            continue;
        }
        auto png = opts.panoptic_dir / need(a, "file_name", where).get<std::string>();
        if (!std::filesystem::exists(png)) throw HarvestError("missing segment map " + png.string());
        Image8 ids = read_image8(png);
        if (ids.width != w || ids.height != h || ids.channels != 3)
            throw HarvestError(png.string() + ": segment map does not match the image size");
        for (const auto& s : need(a, "segments_info", where)) {
            if (s.value("iscrowd", 0) != 0) continue;
            auto seg_id = need(s, "id", where).get<std::uint32_t>();
            Tensor m({h, w});
            for (std::size_t i = 0; i < h * w; ++i) {
                const std::uint8_t* p = &ids.pixels[3 * i];
                m[i] = (p[0] + 256u * p[1] + 65536u * p[2]) == seg_id ? 1.0 : 0.0;
            }
            segs[image_id].push_back({need(s, "category_id", where).get<long long>(), std::move(m)});
        }
    }

    std::vector<HarvestedScene> out;
    for (long long image_id : order) {
        auto it = segs.find(image_id);
        if (it == segs.end()) continue;
        const ImageInfo& info = images[image_id];
        const std::size_t side = std::min(info.width, info.height);
        const std::size_t x0 = (info.width - side) / 2, y0 = (info.height - side) / 2;

        // largest qualifying segment per category
        std::map<long long, Segment> best;
        for (auto& [cat_id, mask] : it->second) {
            auto c = cats.find(cat_id);
            if (c == cats.end())
                throw HarvestError(file + ": unknown category_id " + std::to_string(cat_id));
            if (!c->second.isthing) continue;
            if (std::find(opts.excluded.begin(), opts.excluded.end(), c->second.name) != opts.excluded.end()) continue;
            Tensor crop = crop_square(mask, x0, y0, side);
            double frac = mask_fraction(crop);
            if (frac < opts.min_fraction) continue;
            auto b = best.find(cat_id);
            if (b == best.end() || frac > b->second.fraction) best.insert_or_assign(cat_id, Segment{crop, frac});
        }
        if (best.size() < opts.min_concepts) continue;

        std::vector<std::pair<long long, Segment*>> ranked;
        for (auto& [cid, s] : best) ranked.push_back({cid, &s});
        std::stable_sort(ranked.begin(), ranked.end(),
                         [](const auto& a, const auto& b) { return a.second->fraction > b.second->fraction; });

        auto image_path = opts.images_dir / info.file_name;
        if (!std::filesystem::exists(image_path)) throw HarvestError("missing image file " + image_path.string());
        Tensor image = read_image(image_path);
        if (image.dim(1) != info.height || image.dim(2) != info.width)
            throw HarvestError(image_path.string() + ": size differs from the annotation");

        HarvestedScene hs;
        hs.scene.id = std::filesystem::path(info.file_name).stem().string();
        hs.scene.scene.image = resize_area(crop_square(image, x0, y0, side), opts.size, opts.size);
        for (auto& [cid, s] : ranked) {
            Tensor m = resize_area(s->crop, opts.size, opts.size);
            for (double& v : m.data()) v = v >= 0.5 ? 1.0 : 0.0;
            if (mask_fraction(m) == 0.0) continue;
            hs.scene.scene.masks.push_back(std::move(m));
            hs.scene.scene.names.push_back(cats[cid].name);
            hs.fractions.push_back(s->fraction);
        }
        if (hs.scene.scene.size() < opts.min_concepts) continue;
        out.push_back(std::move(hs));
    }
    return out;
}

}  // namespace decomp
