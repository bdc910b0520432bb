#pragma once

// Miniature experiment config shared by the fast integration tests.

#include "ctrldiff/config.hpp"

inline ctrldiff::RunConfig tiny_run_config() {
    ctrldiff::RunConfig c;
    c.run_name = "tiny";
    c.backbone.in_channels = 1;
    c.backbone.base_channels = 4;
    c.backbone.channel_multipliers = {1, 2};
    c.backbone.mid_channels = 8;
    c.backbone.num_res_blocks_per_level = 1;
    c.backbone.time_embed_dim = 8;
    c.backbone.image_size = 16;
    c.extractor.in_channels = 1;
    c.extractor.num_blocks = 1;
    c.extractor.channels_per_stage = {4, 4};
    c.extractor.downsample_to = 8;
    c.extractor.out_channels = 8;
    c.controlnet.hint_hidden = 4;
    c.train.steps = 4;
    c.train.batch_size = 2;
    c.train.learning_rate = 0.05;
    c.train.eval_every = 2;
    c.train.pretrain_steps = 2;
    c.train.diffusion_steps = 8;
    c.train.eval.sample_steps = 2;
    c.train.eval.num_controls = 2;
    c.dataset.seed = 5;
    c.dataset.count = 12;
    c.dataset.size = 16;
    c.dataset.heldout_count = 4;
    c.validate();
    return c;
}
