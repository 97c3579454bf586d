#pragma once

// Pointer views into a flat parameter (or gradient) buffer laid out by
// standard_manifest(). The manifest order is fixed, so views are built by
// walking offsets rather than looking names up.

#include "dps/model.hpp"

#include <vector>

namespace dps::detail {

template <typename T>
struct LayerView {
    T *ln1_w, *ln1_b;
    T *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
    T *ln2_w, *ln2_b;
    T *w1, *b1, *w2, *b2;
};

template <typename T>
struct WeightView {
    T *                       tok_emb;
    T *                       pos_emb;
    std::vector<LayerView<T>> layers;
    T *                       lnf_w;
    T *                       lnf_b;
    T *                       lm_w;
    T *                       lm_b;
};

template <typename T>
WeightView<T> make_view(const std::vector<TensorSpec> & manifest, T * base, uint32_t num_layers) {
    size_t i = 0;
    auto next = [&]() { return base + manifest[i++].offset; };
    WeightView<T> v{};
    v.tok_emb = next();
    v.pos_emb = next();
    v.layers.resize(num_layers);
    for (auto & L : v.layers) {
        L.ln1_w = next();
        L.ln1_b = next();
        L.wq    = next();
        L.bq    = next();
        L.wk    = next();
        L.bk    = next();
        L.wv    = next();
        L.bv    = next();
        L.wo    = next();
        L.bo    = next();
        L.ln2_w = next();
        L.ln2_b = next();
        L.w1    = next();
        L.b1    = next();
        L.w2    = next();
        L.b2    = next();
    }
    v.lnf_w = next();
    v.lnf_b = next();
    v.lm_w  = next();
    v.lm_b  = next();
    return v;
}

} // namespace dps::detail
