#pragma once

#include <string>
#include <vector>

#include "reinjectr/matrix.hpp"

namespace reinjectr {

// Layer-indexed text-token features. Index 0 is the encoder-side input
// embedding; index l >= 1 is the text stream entering block l (equivalently
// the output of block l-1), so a model with L blocks yields L+1 layers.
// Multi-prompt dumps concatenate token rows across prompts in corpus order.
struct FeatureStack {
    std::vector<Matrix> text;
    std::vector<Matrix> image;  // optional, empty or one matrix per layer
    float timestep = 0.0f;
    std::string prompt_id;

    std::size_t layer_count() const { return text.size(); }
    std::size_t tokens() const { return text.empty() ? 0 : text[0].rows; }
    std::size_t width() const { return text.empty() ? 0 : text[0].cols; }

    void validate() const {
        require(!text.empty(), "feature stack: empty");
        for (const Matrix& m : text) {
            require(m.rows == text[0].rows && m.cols == text[0].cols,
                    "feature stack: inconsistent layer shapes");
        }
        require(image.empty() || image.size() == text.size(),
                "feature stack: image layer count mismatch");
    }

    // Appends the first `active_rows` token rows of each layer of `other`.
    // Used to build corpus-wide stacks from per-prompt forward passes with
    // padding rows dropped.
    void append_tokens(const FeatureStack& other, std::size_t active_rows) {
        require(!other.text.empty(), "append_tokens: empty source stack");
        require(active_rows <= other.tokens(), "append_tokens: active_rows out of range");
        if (text.empty()) {
            text.assign(other.text.size(), Matrix(0, other.width()));
            timestep = other.timestep;
        }
        require(text.size() == other.text.size(), "append_tokens: layer count mismatch");
        for (std::size_t l = 0; l < text.size(); ++l) {
            require(text[l].cols == other.text[l].cols, "append_tokens: width mismatch");
            Matrix& dst = text[l];
            const Matrix& src = other.text[l];
            dst.data.insert(dst.data.end(), src.data.begin(),
                            src.data.begin() + active_rows * src.cols);
            dst.rows += active_rows;
        }
    }
};

}  // namespace reinjectr
