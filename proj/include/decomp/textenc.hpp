#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "decomp/binder.hpp"
#include "decomp/tensor.hpp"

namespace decomp {

inline constexpr std::size_t kPromptLength = 16;
inline constexpr std::size_t kTextDim = 32;

using TokenId = std::uint32_t;

class TokenizeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class HandleError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Fixed base lexicon. Id 0 is the padding token; handle tokens are numbered
// after the last lexicon word.
class Vocabulary {
public:
    Vocabulary();
    explicit Vocabulary(std::vector<std::string> words);

    static constexpr TokenId pad_id = 0;
    static constexpr std::string_view pad_word = "<pad>";

    std::size_t size() const noexcept { return words_.size(); }
    bool contains(std::string_view word) const;
    TokenId id(std::string_view word) const;  // throws TokenizeError
    const std::string& word(TokenId id) const { return words_.at(id); }
    const std::vector<std::string>& words() const noexcept { return words_; }

private:
    std::vector<std::string> words_;
    std::map<std::string, TokenId, std::less<>> index_;
};

struct Handle {
    std::string name;
    TokenId token;
    Tensor embedding;  // [d_text]
    bool background = false;
};

class HandleTable {
public:
    std::size_t size() const noexcept { return handles_.size(); }
    bool empty() const noexcept { return handles_.empty(); }
    const Handle& at(std::size_t i) const { return handles_.at(i); }
    Handle& at(std::size_t i) { return handles_.at(i); }
    const std::vector<Handle>& all() const noexcept { return handles_; }

    const Handle* find(std::string_view name) const;
    const Handle* find(TokenId token) const;
    std::vector<std::size_t> background_handles() const;
    std::vector<std::string> names() const;

    // Appends a handle whose token id follows the lexicon and earlier handles.
    std::size_t insert(const Vocabulary& vocab, std::string name, Tensor embedding, bool background);

    static std::string param_name(std::string_view handle_name) { return "handle." + std::string(handle_name); }

    template <class F>
    void visit_embeddings(F&& f) {
        for (Handle& h : handles_) f(param_name(h.name), h.embedding);
    }
    template <class F>
    void visit_embeddings(F&& f) const {
        for (const Handle& h : handles_) f(param_name(h.name), h.embedding);
    }

private:
    std::vector<Handle> handles_;
};

struct TokenizedPrompt {
    std::vector<TokenId> ids;  // always kPromptLength entries
    // (handle index into the table, token position), in prompt order.
    std::vector<std::pair<std::size_t, std::size_t>> handle_positions;

    std::size_t position_of(std::size_t handle_index) const;  // throws HandleError
    bool is_handle_position(std::size_t position) const;
};

struct TextEncoderConfig {
    std::size_t dim = kTextDim;
    std::size_t length = kPromptLength;
};

// Base token table plus a two-layer per-token transform with identity residual:
// out = e + W2 silu(W1 e + b1) + b2 (row-vector convention).
struct TextEncoderParams {
    Tensor token_embedding;  // [vocab, dim]
    Tensor w1, b1, w2, b2;

    static TextEncoderParams init(const Vocabulary& vocab, const TextEncoderConfig& cfg, std::uint64_t seed);

    template <class F>
    void visit(F&& f) { visit_fields(*this, f); }
    template <class F>
    void visit(F&& f) const { visit_fields(*this, f); }

private:
    template <class Self, class F>
    static void visit_fields(Self& s, F& f) {
        f(std::string("text.token_embedding"), s.token_embedding);
        f(std::string("text.w1"), s.w1);
        f(std::string("text.b1"), s.b1);
        f(std::string("text.w2"), s.w2);
        f(std::string("text.b2"), s.b2);
    }
};

// Lowercases lexicon words; handle names are matched verbatim. Throws
// TokenizeError for unknown words or prompts longer than the context, and
// HandleError (listing the declared handles) for undeclared handles.
TokenizedPrompt tokenize(std::string_view prompt, const Vocabulary& vocab, const HandleTable& handles,
                         std::size_t length = kPromptLength);
std::string detokenize(const std::vector<TokenId>& ids, const Vocabulary& vocab, const HandleTable& handles);

// Per-token embedding matrix [length, dim]. Handle rows are bound under
// HandleTable::param_name, everything else under the text.* names.
NodeId encode(const TokenizedPrompt& tokens, const TextEncoderParams& params, const HandleTable& handles,
              Binder& bind);

// New handle initialized to a copy of the initializer word's base embedding.
std::size_t add_handle(HandleTable& handles, std::string name, std::string_view initializer_word,
                       const Vocabulary& vocab, const TextEncoderParams& params, bool background = false);

}  // namespace decomp
