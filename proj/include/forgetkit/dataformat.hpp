#pragma once

// Stage-specific prompt/response layouts for speech-text instruction tuning:
//
//   asr   P = [T_I, S]           R = [T]
//   tts   P = [T_I, T]           R = [t_1, s_1, ..., t_L, s_L]
//   sqa   P = [S_Q]              R = [T_Q, T_A, t_1, s_1, ..., t_L, s_L]
//   text  P = [T_I]              R = [T_R]
//
// t_i / s_i are the text / speech tokens of the i-th word. Loss is computed
// on R only.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "forgetkit/core.hpp"

namespace forgetkit {

using TokenId = std::uint32_t;
using Tokens = std::vector<TokenId>;

/// Text ids occupy [0, text_vocab_size); speech ids occupy
/// [speech_offset, speech_offset + speech_token_count).
struct VocabLayout {
    std::size_t text_vocab_size = 128256;
    std::size_t speech_token_count = 10000;
    std::size_t speech_offset = 128256;

    void validate() const {
        if (text_vocab_size == 0 || speech_token_count == 0) throw DataError("vocab layout: sizes must be positive");
        if (speech_offset < text_vocab_size) throw DataError("vocab layout: speech ids overlap text ids");
    }

    bool is_text(TokenId id) const noexcept { return id < text_vocab_size; }
    bool is_speech(TokenId id) const noexcept {
        return id >= speech_offset && id < speech_offset + speech_token_count;
    }

    static VocabLayout from_json(const nlohmann::json& j) {
        VocabLayout v;
        auto count = [&](const char* key, std::size_t& dst) {
            if (!j.contains(key)) return;
            if (!numeric::is_count(j[key])) throw ConfigError(key, "must be a non-negative integer");
            dst = j[key].get<std::size_t>();
        };
        count("text_vocab_size", v.text_vocab_size);
        count("speech_token_count", v.speech_token_count);
        v.speech_offset = v.text_vocab_size;
        count("speech_offset", v.speech_offset);
        v.validate();
        return v;
    }
};

struct Word {
    Tokens text;
    Tokens speech;
    bool operator==(const Word&) const = default;
};

/// Word-aligned text/speech pair: words[i] holds (t_i, s_i).
struct WordAligned {
    std::vector<Word> words;

    Tokens text() const {
        Tokens out;
        for (const auto& w : words) out.insert(out.end(), w.text.begin(), w.text.end());
        return out;
    }

    /// Every word has non-empty text and speech lists with ids in range.
    void validate(const VocabLayout& layout) const {
        for (std::size_t i = 0; i < words.size(); ++i) {
            const auto& w = words[i];
            if (w.text.empty() || w.speech.empty())
                throw DataError("word " + std::to_string(i) + " has an empty token list");
            for (auto t : w.text)
                if (!layout.is_text(t)) throw DataError("word " + std::to_string(i) + ": token " + std::to_string(t) + " is not a text id");
            for (auto s : w.speech)
                if (!layout.is_speech(s)) throw DataError("word " + std::to_string(i) + ": token " + std::to_string(s) + " is not a speech id");
        }
    }

    bool operator==(const WordAligned&) const = default;
};

struct Example {
    std::string id;
    Task task = Task::text;
    Tokens prompt;
    Tokens response;
    /// One flag per token of prompt‖response; true where loss is computed.
    std::vector<bool> loss_mask;
    /// Word alignment of the interleaved block, when the task has one.
    std::optional<WordAligned> words;
};

/// Word-by-word interleaving t_1‖s_1‖...‖t_L‖s_L.
inline Tokens interleave(const WordAligned& aligned) {
    Tokens out;
    for (std::size_t i = 0; i < aligned.words.size(); ++i) {
        const auto& w = aligned.words[i];
        if (w.text.empty() || w.speech.empty()) throw DataError("interleave: word " + std::to_string(i) + " has an empty token list");
        out.insert(out.end(), w.text.begin(), w.text.end());
        out.insert(out.end(), w.speech.begin(), w.speech.end());
    }
    return out;
}

/// Inverse of interleave: a word ends at each speech-to-text transition.
inline WordAligned deinterleave(std::span<const TokenId> seq, const VocabLayout& layout) {
    WordAligned out;
    bool in_speech = false;
    for (std::size_t k = 0; k < seq.size(); ++k) {
        const TokenId id = seq[k];
        const bool speech = layout.is_speech(id);
        if (!speech && !layout.is_text(id))
            throw DataError("deinterleave: token " + std::to_string(id) + " at position " + std::to_string(k) + " is outside the vocabulary");
        if (k == 0 && speech) throw DataError("deinterleave: sequence starts with a speech token");
        if (!speech && (k == 0 || in_speech)) out.words.emplace_back();
        (speech ? out.words.back().speech : out.words.back().text).push_back(id);
        in_speech = speech;
    }
    if (!seq.empty() && !in_speech) throw DataError("deinterleave: final word has no speech tokens");
    return out;
}

/// Instruction templates, ten per task; the first entry of asr and tts is
/// the canonical phrasing.
inline const std::array<std::string_view, 10>& instruction_templates(Task task) {
    static const std::array<std::string_view, 10> asr = {
        "Please repeat the following words:",
        "Transcribe the following speech:",
        "Write down what is said in this audio:",
        "Convert the following speech into text:",
        "What does the speaker say?",
        "Listen and transcribe:",
        "Please write out the spoken words:",
        "Provide a transcript of this recording:",
        "Turn this utterance into text:",
        "Type out what you hear:",
    };
    static const std::array<std::string_view, 10> tts = {
        "Please speak out loud the following words:",
        "Read the following text aloud:",
        "Say the following sentence:",
        "Convert the following text into speech:",
        "Pronounce these words:",
        "Please say this out loud:",
        "Speak the following passage:",
        "Produce speech for the following text:",
        "Read this sentence out loud:",
        "Voice the following words:",
    };
    if (task == Task::asr) return asr;
    if (task == Task::tts) return tts;
    throw DataError(std::string("no instruction templates for task '") + to_string(task) + "'");
}

/// Seeded choice among ten templates for one example.
inline std::size_t pick_instruction(std::uint64_t seed, std::string_view example_id) {
    rng::Engine eng(rng::derive(seed, std::string_view("instruction"), example_id));
    return static_cast<std::size_t>(rng::uniform_index(eng, 10));
}

struct FormatOptions {
    /// Optional token inserted between T_Q, T_A and the interleaved block of sqa.
    std::optional<TokenId> sqa_separator;
};

namespace detail {

inline void require_nonempty(const Tokens& t, const char* what) {
    if (t.empty()) throw DataError(std::string(what) + " must not be empty");
}

inline void require_text(const Tokens& t, const VocabLayout& layout, const char* what) {
    for (auto id : t)
        if (!layout.is_text(id)) throw DataError(std::string(what) + ": token " + std::to_string(id) + " is not a text id");
}

inline void require_speech(const Tokens& t, const VocabLayout& layout, const char* what) {
    for (auto id : t)
        if (!layout.is_speech(id)) throw DataError(std::string(what) + ": token " + std::to_string(id) + " is not a speech id");
}

inline Example make_example(std::string id, Task task, Tokens prompt, Tokens response) {
    Example ex{std::move(id), task, std::move(prompt), std::move(response), {}, std::nullopt};
    ex.loss_mask.assign(ex.prompt.size(), false);
    ex.loss_mask.resize(ex.prompt.size() + ex.response.size(), true);
    return ex;
}

inline Tokens concat(std::initializer_list<const Tokens*> parts) {
    Tokens out;
    for (const auto* p : parts) out.insert(out.end(), p->begin(), p->end());
    return out;
}

}  // namespace detail

inline Example format_asr(const Tokens& instruction, const Tokens& speech, const Tokens& transcript,
                          const VocabLayout& layout, std::string id = "") {
    detail::require_nonempty(instruction, "asr instruction");
    detail::require_nonempty(speech, "asr speech");
    detail::require_nonempty(transcript, "asr transcript");
    detail::require_text(instruction, layout, "asr instruction");
    detail::require_speech(speech, layout, "asr speech");
    detail::require_text(transcript, layout, "asr transcript");
    return detail::make_example(std::move(id), Task::asr, detail::concat({&instruction, &speech}), transcript);
}

inline Example format_tts(const Tokens& instruction, const WordAligned& aligned, const VocabLayout& layout,
                          std::string id = "") {
    detail::require_nonempty(instruction, "tts instruction");
    detail::require_text(instruction, layout, "tts instruction");
    if (aligned.words.empty()) throw DataError("tts words must not be empty");
    aligned.validate(layout);
    const Tokens text = aligned.text();
    auto ex = detail::make_example(std::move(id), Task::tts, detail::concat({&instruction, &text}), interleave(aligned));
    ex.words = aligned;
    return ex;
}

inline Example format_sqa(const Tokens& question_speech, const Tokens& question_text, const WordAligned& answer,
                          const VocabLayout& layout, std::string id = "", const FormatOptions& opts = {}) {
    detail::require_nonempty(question_speech, "sqa question speech");
    detail::require_nonempty(question_text, "sqa question text");
    if (answer.words.empty()) throw DataError("sqa answer must not be empty");
    detail::require_speech(question_speech, layout, "sqa question speech");
    detail::require_text(question_text, layout, "sqa question text");
    answer.validate(layout);
    if (opts.sqa_separator && !layout.is_text(*opts.sqa_separator))
        throw DataError("sqa separator must be a text id");

    Tokens response = question_text;
    auto sep = [&] {
        if (opts.sqa_separator) response.push_back(*opts.sqa_separator);
    };
    sep();
    const Tokens answer_text = answer.text();
    response.insert(response.end(), answer_text.begin(), answer_text.end());
    sep();
    const Tokens block = interleave(answer);
    response.insert(response.end(), block.begin(), block.end());
    auto ex = detail::make_example(std::move(id), Task::sqa, question_speech, std::move(response));
    ex.words = answer;
    return ex;
}

inline Example format_text(const Tokens& instruction, const Tokens& response, const VocabLayout& layout,
                           std::string id = "") {
    detail::require_nonempty(instruction, "text instruction");
    detail::require_nonempty(response, "text response");
    detail::require_text(instruction, layout, "text instruction");
    detail::require_text(response, layout, "text response");
    return detail::make_example(std::move(id), Task::text, instruction, response);
}

/// Structural checks every formatted example satisfies.
inline void validate_example(const Example& ex, const VocabLayout& layout) {
    if (ex.loss_mask.size() != ex.prompt.size() + ex.response.size())
        throw DataError("example '" + ex.id + "': loss mask length mismatch");
    for (std::size_t k = 0; k < ex.loss_mask.size(); ++k)
        if (ex.loss_mask[k] != (k >= ex.prompt.size()))
            throw DataError("example '" + ex.id + "': loss mask is not the response indicator");
    for (const Tokens* part : {&ex.prompt, &ex.response})
        for (auto id : *part)
            if (!layout.is_text(id) && !layout.is_speech(id))
                throw DataError("example '" + ex.id + "': token " + std::to_string(id) + " outside the vocabulary");
}

// JSON helpers for the manifest payload schema
//   {id, task, prompt:[ids], response:[ids], words:[{t:[ids], s:[ids]}]}

inline nlohmann::json words_to_json(const WordAligned& w) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& word : w.words) arr.push_back({{"t", word.text}, {"s", word.speech}});
    return arr;
}

inline Tokens tokens_from_json(const nlohmann::json& j, const std::string& field) {
    if (!j.is_array()) throw DataError("field '" + field + "' must be an array of token ids");
    Tokens out;
    out.reserve(j.size());
    for (const auto& v : j) {
        if (!numeric::is_count(v) || v.get<std::uint64_t>() > 0xffffffffULL)
            throw DataError("field '" + field + "' must contain non-negative 32-bit token ids");
        out.push_back(v.get<TokenId>());
    }
    return out;
}

inline WordAligned words_from_json(const nlohmann::json& j, const std::string& field) {
    if (!j.is_array()) throw DataError("field '" + field + "' must be an array of {t, s} objects");
    WordAligned out;
    for (std::size_t i = 0; i < j.size(); ++i) {
        const auto& w = j[i];
        const auto f = field + "[" + std::to_string(i) + "]";
        if (!w.is_object() || !w.contains("t") || !w.contains("s")) throw DataError("field '" + f + "' needs keys t and s");
        out.words.push_back({tokens_from_json(w["t"], f + ".t"), tokens_from_json(w["s"], f + ".s")});
    }
    return out;
}

inline nlohmann::json example_to_json(const Example& ex) {
    nlohmann::json j{{"id", ex.id}, {"task", to_string(ex.task)}, {"prompt", ex.prompt}, {"response", ex.response}};
    if (ex.words) j["words"] = words_to_json(*ex.words);
    return j;
}

}  // namespace forgetkit
