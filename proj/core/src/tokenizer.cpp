#include "dps/tokenizer.hpp"

#include "dps/error.hpp"

#include <algorithm>

namespace dps {

Tokenizer::Tokenizer(std::vector<std::string> user_vocab) : users_(std::move(user_vocab)) {}

Tokenizer Tokenizer::for_checkpoint(const ModelCheckpoint & ckpt) {
    Tokenizer tok(ckpt.user_vocab());
    if (tok.vocab_size() > ckpt.config().vocab_size) {
        fail(ErrorKind::config, "checkpoint vocab_size " + std::to_string(ckpt.config().vocab_size) +
                                    " too small for " + std::to_string(tok.users().size()) + " user tokens");
    }
    return tok;
}

std::optional<TokenId> Tokenizer::user_token(std::string_view user_id) const {
    auto it = std::find(users_.begin(), users_.end(), user_id);
    if (it == users_.end()) {
        return std::nullopt;
    }
    return tokens::USER_BASE + static_cast<TokenId>(it - users_.begin());
}

std::vector<TokenId> Tokenizer::encode_text(std::string_view text) {
    std::vector<TokenId> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) {
        ids.push_back(static_cast<TokenId>(c));
    }
    return ids;
}

std::string Tokenizer::decode(std::span<const TokenId> ids) {
    std::string out;
    for (TokenId id : ids) {
        if (id >= 0 && id < tokens::kNumBytes) {
            out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
            continue;
        }
        switch (id) {
            case tokens::BOS:         out += "<BOS>"; break;
            case tokens::EOS:         out += "<EOS>"; break;
            case tokens::PAD:         out += "<PAD>"; break;
            case tokens::SEP_PROFILE: out += "<P>"; break;
            case tokens::SEP_INPUT:   out += "<I>"; break;
            case tokens::SEP_TARGET:  out += "<T>"; break;
            default:                  out += "<U" + std::to_string(id - tokens::USER_BASE) + ">"; break;
        }
    }
    return out;
}

TokenSequence Tokenizer::build(const Example & example, size_t first_profile, bool with_profile,
                               bool with_target) const {
    TokenSequence seq;
    auto push = [&](TokenId id, TokenRole role) {
        seq.ids.push_back(id);
        seq.roles.push_back(role);
    };
    push(tokens::BOS, TokenRole::other);
    if (with_profile) {
        if (auto u = user_token(example.user_id)) {
            push(*u, TokenRole::profile);
        }
        for (size_t i = first_profile; i < example.profile_texts.size(); ++i) {
            push(tokens::SEP_PROFILE, TokenRole::profile);
            for (TokenId id : encode_text(example.profile_texts[i])) {
                push(id, TokenRole::profile);
            }
        }
    }
    push(tokens::SEP_INPUT, TokenRole::input);
    for (TokenId id : encode_text(example.input_text)) {
        push(id, TokenRole::input);
    }
    push(tokens::SEP_TARGET, TokenRole::input);
    if (with_target) {
        for (TokenId id : encode_text(example.target_text)) {
            push(id, TokenRole::target);
        }
        push(tokens::EOS, TokenRole::target);
    }
    return seq;
}

TokenSequence Tokenizer::encode_example(const Example & example, size_t max_seq_len, bool with_profile) const {
    if (example.target_text.empty()) {
        fail(ErrorKind::input, "example for user '" + example.user_id + "' has an empty target");
    }
    for (size_t first = 0; first <= example.profile_texts.size(); ++first) {
        TokenSequence seq = build(example, first, with_profile, true);
        if (seq.size() <= max_seq_len) {
            return seq;
        }
    }
    fail(ErrorKind::length, "input + target of example for user '" + example.user_id + "' exceed max_seq_len " +
                                std::to_string(max_seq_len));
}

TokenSequence Tokenizer::encode_context(const Example & example, size_t max_seq_len, bool with_profile,
                                        size_t reserve) const {
    if (reserve >= max_seq_len) {
        fail(ErrorKind::length, "generation headroom exceeds max_seq_len");
    }
    const size_t budget = max_seq_len - reserve;
    for (size_t first = 0; first <= example.profile_texts.size(); ++first) {
        TokenSequence seq = build(example, first, with_profile, false);
        if (seq.size() <= budget) {
            return seq;
        }
    }
    fail(ErrorKind::length, "context of example for user '" + example.user_id + "' exceeds max_seq_len " +
                                std::to_string(max_seq_len));
}

TokenSequence Tokenizer::encode_profile_text(std::string_view text, size_t max_seq_len) const {
    TokenSequence seq;
    seq.ids.push_back(tokens::BOS);
    seq.ids.push_back(tokens::SEP_PROFILE);
    for (TokenId id : encode_text(text)) {
        seq.ids.push_back(id);
    }
    if (seq.size() > max_seq_len) {
        seq.ids.resize(max_seq_len);
    }
    seq.roles.assign(seq.size(), TokenRole::profile);
    seq.roles[0] = TokenRole::other;
    return seq;
}

} // namespace dps
