#pragma once

// Independent shape-enumeration oracle for parameter counts: recomputes
// expected totals straight from the configs and the documented layer layout,
// without touching the registry machinery it checks.

#include <cstdint>

#include "ctrldiff/backbone.hpp"
#include "ctrldiff/control.hpp"

namespace param_oracle {

inline int64_t conv(int in, int out, int k) {
    return static_cast<int64_t>(out) * in * k * k + out;
}
inline int64_t norm(int c) { return 2 * static_cast<int64_t>(c); }
inline int64_t lin(int in, int out) { return static_cast<int64_t>(out) * in + out; }

struct Breakdown {
    int64_t total = 0;
    int64_t norm_params = 0;  // scale/shift of every norm layer
    int64_t mid_params = 0;   // the two mid blocks
};

inline int64_t resblock(int in, int out, int tdim, int hidden, int64_t* norms) {
    int64_t n = 0;
    if (hidden > 0) {
        n += norm(in) + conv(in, static_cast<int>(hidden), 1) + lin(tdim, static_cast<int>(hidden));
        n += norm(static_cast<int>(hidden)) + conv(static_cast<int>(hidden), static_cast<int>(hidden), 3);
        n += norm(static_cast<int>(hidden)) + conv(static_cast<int>(hidden), out, 1);
        *norms += norm(in) + 2 * norm(static_cast<int>(hidden));
    } else {
        n += norm(in) + conv(in, out, 3) + lin(tdim, out) + norm(out) + conv(out, out, 3);
        *norms += norm(in) + norm(out);
    }
    if (in != out) n += conv(in, out, 1);
    return n;
}

inline Breakdown backbone_params(const ctrldiff::BackboneConfig& c) {
    Breakdown b;
    int L = c.levels();
    int tdim = c.time_embed_dim;
    b.total += conv(c.in_channels, c.level_channels(0), 3);  // stem
    b.total += lin(tdim, tdim) * 2;                          // time mlp
    for (int i = 0; i < L; ++i) {
        int ch = c.level_channels(i);
        for (int j = 0; j < c.num_res_blocks_per_level; ++j) {
            b.total += resblock(ch, ch, tdim, 0, &b.norm_params);
        }
        if (i + 1 < L) b.total += conv(ch, c.level_channels(i + 1), 3);
    }
    int h = c.mid_hidden();
    int64_t mid_norms = 0;
    b.mid_params += resblock(c.port_channels(), c.mid_channels, tdim, h, &mid_norms);
    b.mid_params += resblock(c.mid_channels, c.mid_channels, tdim, h, &mid_norms);
    b.norm_params += mid_norms;
    b.total += b.mid_params;
    for (int i = L - 1; i >= 0; --i) {
        int ch = c.level_channels(i);
        int in_ch = (i == L - 1 ? c.mid_channels : ch) + ch;
        for (int j = 0; j < c.num_res_blocks_per_level; ++j) {
            b.total += resblock(j == 0 ? in_ch : ch, ch, tdim, 0, &b.norm_params);
        }
        if (i > 0) b.total += conv(ch, c.level_channels(i - 1), 3);
    }
    b.total += norm(c.level_channels(0)) + conv(c.level_channels(0), c.in_channels, 3);
    b.norm_params += norm(c.level_channels(0));
    return b;
}

// extractor + gamma (the full plug-and-play control module)
inline int64_t controlnext_params(const ctrldiff::ControlExtractorConfig& c) {
    int64_t n = conv(c.in_channels, c.channels_per_stage.front(), 3);
    int S = c.stages();
    for (int s = 0; s < S; ++s) {
        int ch = c.channels_per_stage[static_cast<size_t>(s)];
        for (int j = 0; j < c.num_blocks; ++j) {
            n += 2 * norm(ch) + 2 * conv(ch, ch, 3);  // plain res block
        }
        if (s + 1 < S) n += conv(ch, c.channels_per_stage[static_cast<size_t>(s + 1)], 3);
    }
    n += conv(c.channels_per_stage.back(), c.out_channels, 1);
    n += c.out_channels;  // gamma
    return n;
}

// hint encoder + encoder/mid copy (incl. time mlp) + zero convs
inline int64_t controlnet_params(const ctrldiff::BackboneConfig& c, int hint_hidden,
                                 int control_channels) {
    int64_t n = conv(control_channels, hint_hidden, 3) + conv(hint_hidden, c.in_channels, 3);
    n += conv(c.in_channels, c.level_channels(0), 3);  // branch stem
    n += lin(c.time_embed_dim, c.time_embed_dim) * 2;  // branch time mlp
    int64_t norms = 0;
    int L = c.levels();
    for (int i = 0; i < L; ++i) {
        int ch = c.level_channels(i);
        for (int j = 0; j < c.num_res_blocks_per_level; ++j) {
            n += resblock(ch, ch, c.time_embed_dim, 0, &norms);
        }
        if (i + 1 < L) n += conv(ch, c.level_channels(i + 1), 3);
        n += conv(ch, ch, 1);  // level bridge
    }
    int h = c.mid_hidden();
    n += resblock(c.port_channels(), c.mid_channels, c.time_embed_dim, h, &norms);
    n += resblock(c.mid_channels, c.mid_channels, c.time_embed_dim, h, &norms);
    n += conv(c.mid_channels, c.mid_channels, 1);  // mid bridge
    return n;
}

}  // namespace param_oracle
