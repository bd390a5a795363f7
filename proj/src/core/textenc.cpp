#include "decomp/textenc.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <random>
#include <sstream>

namespace decomp {

namespace {

// Words of the prompt templates plus a handful of initializer and class words.
const std::vector<std::string>& base_lexicon() {
    static const std::vector<std::string> words{
        std::string(Vocabulary::pad_word),
        "a", "an", "photo", "of", "and", "the", "at", "in", "on", "with", "top",
        "beach", "jungle", "snow", "street", "pink", "fabric", "wooden", "floor",
        "city", "background", "mountain", "eiffel", "tower", "floating", "water",
        "object", "thing", "shape", "square", "disc", "circle", "red", "blue", "green",
        "yellow", "textured", "picture", "image"};
    return words;
}

std::string lower(std::string_view w) {
    std::string out(w);
    std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

bool looks_like_handle(std::string_view w) { return w.size() >= 2 && w.front() == '[' && w.back() == ']'; }

}  // namespace

Vocabulary::Vocabulary() : Vocabulary(base_lexicon()) {}

Vocabulary::Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
    if (words_.empty() || words_.front() != pad_word) {
        words_.insert(words_.begin(), std::string(pad_word));
    }
    for (std::size_t i = 0; i < words_.size(); ++i) {
        if (!index_.emplace(words_[i], static_cast<TokenId>(i)).second) {
            throw std::invalid_argument("duplicate lexicon word '" + words_[i] + "'");
        }
    }
}

bool Vocabulary::contains(std::string_view word) const { return index_.find(word) != index_.end(); }

TokenId Vocabulary::id(std::string_view word) const {
    auto it = index_.find(word);
    if (it == index_.end()) {
        throw TokenizeError("unknown word '" + std::string(word) + "'");
    }
    return it->second;
}

const Handle* HandleTable::find(std::string_view name) const {
    for (const Handle& h : handles_) {
        if (h.name == name) return &h;
    }
    return nullptr;
}

const Handle* HandleTable::find(TokenId token) const {
    for (const Handle& h : handles_) {
        if (h.token == token) return &h;
    }
    return nullptr;
}

std::vector<std::size_t> HandleTable::background_handles() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < handles_.size(); ++i) {
        if (handles_[i].background) out.push_back(i);
    }
    return out;
}

std::vector<std::string> HandleTable::names() const {
    std::vector<std::string> out;
    for (const Handle& h : handles_) out.push_back(h.name);
    return out;
}

std::size_t HandleTable::insert(const Vocabulary& vocab, std::string name, Tensor embedding, bool background) {
    if (find(name) != nullptr) {
        throw HandleError("duplicate handle name '" + name + "'");
    }
    if (!looks_like_handle(name)) {
        throw HandleError("handle names must be bracketed like [v1], got '" + name + "'");
    }
    if (!handles_.empty() && embedding.shape() != handles_.front().embedding.shape()) {
        throw ShapeError("handle embedding " + shape_str(embedding.shape()) + " differs from table dim " +
                         shape_str(handles_.front().embedding.shape()));
    }
    const auto token = static_cast<TokenId>(vocab.size() + handles_.size());
    handles_.push_back(Handle{std::move(name), token, std::move(embedding), background});
    return handles_.size() - 1;
}

std::size_t TokenizedPrompt::position_of(std::size_t handle_index) const {
    for (const auto& [h, pos] : handle_positions) {
        if (h == handle_index) return pos;
    }
    throw HandleError("handle #" + std::to_string(handle_index) + " does not occur in the prompt");
}

bool TokenizedPrompt::is_handle_position(std::size_t position) const {
    return std::any_of(handle_positions.begin(), handle_positions.end(),
                       [&](const auto& hp) { return hp.second == position; });
}

TextEncoderParams TextEncoderParams::init(const Vocabulary& vocab, const TextEncoderConfig& cfg, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto normal = [&](Shape s, double sd) {
        std::normal_distribution<double> nd(0.0, sd);
        Tensor t(std::move(s));
        for (double& v : t.data()) v = nd(rng);
        return t;
    };
    const std::size_t d = cfg.dim;
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    TextEncoderParams p;
    p.token_embedding = normal({vocab.size(), d}, 1.0);
    p.w1 = normal({d, d}, sd);
    p.b1 = Tensor(Shape{d});
    p.w2 = normal({d, d}, 0.5 * sd);
    p.b2 = Tensor(Shape{d});
    return p;
}

TokenizedPrompt tokenize(std::string_view prompt, const Vocabulary& vocab, const HandleTable& handles,
                         std::size_t length) {
    TokenizedPrompt out;
    out.ids.assign(length, Vocabulary::pad_id);
    std::istringstream is{std::string(prompt)};
    std::string word;
    std::size_t pos = 0;
    while (is >> word) {
        if (pos == length) {
            throw TokenizeError("prompt exceeds " + std::to_string(length) + " tokens: '" + std::string(prompt) + "'");
        }
        if (looks_like_handle(word)) {
            const Handle* h = handles.find(word);
            if (h == nullptr) {
                std::string avail;
                for (const auto& n : handles.names()) avail += (avail.empty() ? "" : ", ") + n;
                throw HandleError("unknown handle " + word + "; available handles: " + (avail.empty() ? "none" : avail));
            }
            out.ids[pos] = h->token;
            out.handle_positions.emplace_back(static_cast<std::size_t>(h - handles.all().data()), pos);
        } else {
            out.ids[pos] = vocab.id(lower(word));
        }
        ++pos;
    }
    return out;
}

std::string detokenize(const std::vector<TokenId>& ids, const Vocabulary& vocab, const HandleTable& handles) {
    std::string out;
    for (TokenId id : ids) {
        if (id == Vocabulary::pad_id) continue;
        const std::string& w = id < vocab.size() ? vocab.word(id) : [&]() -> const std::string& {
            const Handle* h = handles.find(id);
            if (h == nullptr) throw TokenizeError("unknown token id " + std::to_string(id));
            return h->name;
        }();
        if (!out.empty()) out += ' ';
        out += w;
    }
    return out;
}

NodeId encode(const TokenizedPrompt& tokens, const TextEncoderParams& params, const HandleTable& handles,
              Binder& bind) {
    Graph& g = bind.graph();
    const NodeId table = bind("text.token_embedding", params.token_embedding);
    const TokenId vocab_size = static_cast<TokenId>(params.token_embedding.dim(0));

    std::vector<NodeId> parts;
    std::vector<std::size_t> run;
    auto flush = [&] {
        if (!run.empty()) {
            parts.push_back(ops::gather_rows(g, table, run));
            run.clear();
        }
    };
    for (TokenId id : tokens.ids) {
        if (id < vocab_size) {
            run.push_back(id);
            continue;
        }
        const Handle* h = handles.find(id);
        if (h == nullptr) {
            throw TokenizeError("token id " + std::to_string(id) + " is neither a lexicon word nor a handle");
        }
        flush();
        parts.push_back(bind(HandleTable::param_name(h->name), h->embedding));
    }
    flush();
    const NodeId e = ops::concat_rows(g, parts);

    NodeId h = ops::matmul(g, e, bind("text.w1", params.w1));
    h = ops::silu(g, ops::broadcast_add(g, h, bind("text.b1", params.b1)));
    h = ops::matmul(g, h, bind("text.w2", params.w2));
    h = ops::broadcast_add(g, h, bind("text.b2", params.b2));
    return ops::add(g, e, h);
}

std::size_t add_handle(HandleTable& handles, std::string name, std::string_view initializer_word,
                       const Vocabulary& vocab, const TextEncoderParams& params, bool background) {
    if (handles.find(name) != nullptr) {
        throw HandleError("duplicate handle name '" + name + "'");
    }
    if (!vocab.contains(lower(initializer_word))) {
        throw HandleError("unknown initializer word '" + std::string(initializer_word) + "'");
    }
    const TokenId src = vocab.id(lower(initializer_word));
    const std::size_t d = params.token_embedding.dim(1);
    const double* row = params.token_embedding.ptr() + static_cast<std::size_t>(src) * d;
    Tensor emb(Shape{d}, std::vector<double>(row, row + d));
    return handles.insert(vocab, std::move(name), std::move(emb), background);
}

}  // namespace decomp
