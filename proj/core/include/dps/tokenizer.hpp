#pragma once

#include "dps/example.hpp"
#include "dps/model.hpp"

#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace dps {

namespace tokens {
inline constexpr TokenId kNumBytes   = 256;
inline constexpr TokenId BOS         = 256;
inline constexpr TokenId EOS         = 257;
inline constexpr TokenId PAD         = 258;
inline constexpr TokenId SEP_PROFILE = 259;
inline constexpr TokenId SEP_INPUT   = 260;
inline constexpr TokenId SEP_TARGET  = 261;
inline constexpr TokenId USER_BASE   = 262;
} // namespace tokens

inline uint32_t vocab_size_for_users(size_t num_users) {
    return static_cast<uint32_t>(tokens::USER_BASE + num_users);
}

// Byte-level tokenizer with reserved specials and one USER_i token per known
// user id. Sequence layout for an example:
//
//   BOS USER_u (SEP_PROFILE profile_i)* SEP_INPUT input SEP_TARGET target EOS
//
// USER_u and the profile segment carry the profile role; SEP_INPUT and the
// input bytes the input role; everything after SEP_TARGET (including EOS) the
// target role. The USER token is omitted for ids absent from the vocabulary.
class Tokenizer {
public:
    Tokenizer() = default;
    explicit Tokenizer(std::vector<std::string> user_vocab);

    static Tokenizer for_checkpoint(const ModelCheckpoint & ckpt);

    uint32_t                   vocab_size() const { return vocab_size_for_users(users_.size()); }
    std::optional<TokenId>     user_token(std::string_view user_id) const;
    const std::vector<std::string> & users() const { return users_; }

    static std::vector<TokenId> encode_text(std::string_view text);
    // Bytes are emitted verbatim; specials render as <BOS>, <U3>, ...
    static std::string decode(std::span<const TokenId> ids);

    // Full example with roles. Profile entries are dropped oldest first until
    // the sequence fits; throws ErrorKind::length if input + target alone do
    // not fit, ErrorKind::input on an empty target. with_profile == false
    // leaves out the USER token and profile segment.
    TokenSequence encode_example(const Example & example, size_t max_seq_len, bool with_profile = true) const;

    // Generation context: everything up to and including SEP_TARGET. With
    // with_profile == false the USER token and profile segment are left out.
    // reserve tokens of headroom are kept free for generation.
    TokenSequence encode_context(const Example & example, size_t max_seq_len, bool with_profile = true,
                                 size_t reserve = 0) const;

    // BOS SEP_PROFILE text, used for profile embeddings.
    TokenSequence encode_profile_text(std::string_view text, size_t max_seq_len) const;

private:
    TokenSequence build(const Example & example, size_t first_profile, bool with_profile, bool with_target) const;

    std::vector<std::string> users_;
};

} // namespace dps
