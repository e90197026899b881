#pragma once

#include <stdexcept>
#include <utility>
#include <vector>

#include "seqlab/taskgen.hpp"

namespace seqlab {

struct PackedSequence {
    std::vector<int> ids;
    std::vector<bool> loss_mask;      // true on response tokens only
    std::vector<int> segment_starts;  // one entry per packed example
};

// Greedy first-fit in the given order; an example is never split across
// packs.
inline std::vector<PackedSequence> pack_sequences(
    const std::vector<std::pair<std::vector<int>, std::vector<int>>>& examples, int budget) {
    std::vector<PackedSequence> packs;
    for (const auto& [prompt, response] : examples) {
        int len = static_cast<int>(prompt.size() + response.size());
        if (len > budget)
            throw std::invalid_argument("pack_sequences: example exceeds the token budget");
        PackedSequence* dst = nullptr;
        for (auto& p : packs)
            if (static_cast<int>(p.ids.size()) + len <= budget) {
                dst = &p;
                break;
            }
        if (!dst) {
            packs.emplace_back();
            dst = &packs.back();
        }
        dst->segment_starts.push_back(static_cast<int>(dst->ids.size()));
        dst->ids.insert(dst->ids.end(), prompt.begin(), prompt.end());
        dst->loss_mask.insert(dst->loss_mask.end(), prompt.size(), false);
        dst->ids.insert(dst->ids.end(), response.begin(), response.end());
        dst->loss_mask.insert(dst->loss_mask.end(), response.size(), true);
    }
    return packs;
}

// [##, p11..p1c, &&, p21..p2c, &&, ..., pr1..prc, ##]
// one newline marker after each row except the last.
inline std::vector<int> layout_image_tokens(int rows, int cols, const std::vector<int>& patch_ids,
                                            const VocabLayout& layout) {
    if (rows < 1 || cols < 1 || patch_ids.size() != static_cast<std::size_t>(rows) * cols)
        throw std::invalid_argument("layout_image_tokens: patch count does not match rows*cols");
    std::vector<int> out;
    out.reserve(patch_ids.size() + 2 + static_cast<std::size_t>(rows - 1));
    out.push_back(layout.img_open_tok);
    for (int r = 0; r < rows; ++r) {
        if (r > 0) out.push_back(layout.img_nl_tok);
        for (int c = 0; c < cols; ++c)
            out.push_back(patch_ids[static_cast<std::size_t>(r) * cols + c]);
    }
    out.push_back(layout.img_open_tok);
    return out;
}

}  // namespace seqlab
