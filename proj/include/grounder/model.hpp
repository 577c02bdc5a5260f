#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "grounder/geometry.hpp"
#include "grounder/nn.hpp"
#include "grounder/tokenizer.hpp"

#include <nlohmann/json.hpp>

namespace grounder {

struct ModelConfig {
    int image_size = 64;
    int image_channels = 1;
    int vision_backbone_channels = 8;   // stem width, doubled by each strided block
    int vision_stride = 16;             // total downsampling, one of 4/8/16/32
    int vision_tf_layers = 2;
    int vision_width = 48;              // visual token width
    int text_vocab_size = 0;            // 0: take the size from the vocabulary
    int text_tf_layers = 2;
    int text_width = 48;
    int max_text_len = 12;              // tokens per phrase incl. [CLS]/[SEP]
    int fused_width = 64;               // width inside the fusion transformer
    int vlt_layers = 2;
    int vlt_heads = 2;
    int mlp_hidden = 64;                // grounding head hidden width
    double dropout = 0.0;  // nothing is pretrained at desk scale; full() turns it on

    static ModelConfig toy();
    static ModelConfig full();          // full-scale reference sizes; not used in tests
    void validate() const;

    int grid_dim() const { return image_size / vision_stride; }
    int n_visual() const { return grid_dim() * grid_dim(); }
    int n_fused() const { return n_visual() + max_text_len + 1; }

    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
    bool operator==(const ModelConfig&) const = default;
};

struct VisualFeatureGrid {
    Tensor tokens;  // (rows*cols) x width, row-major spatial order
    int rows = 0, cols = 0;
};

struct TextFeatures {
    Tensor tokens;               // max_text_len x width
    std::vector<bool> attend;    // false on [PAD] positions
    std::vector<int> ids;
};

// Fusion output. Token rows are laid out [visual | text | REG]; the text
// block keeps tokenizer order, so its first row is [CLS].
struct FusedOutput {
    Tensor tokens;             // n_fused() x fused_width
    Tensor attn;               // n_fused() x n_fused(), head-averaged, rows sum to 1
    int n_visual = 0;
    int n_text = 0;
    int grid_rows = 0, grid_cols = 0;
    std::vector<bool> key_mask;

    int n_fused() const { return n_visual + n_text + 1; }
    int visual_begin() const { return 0; }
    int text_begin() const { return n_visual; }
    int cls_index() const { return n_visual; }
    int reg_index() const { return n_visual + n_text; }

    Tensor token(int i) const { return row(tokens, i); }
    Tensor h_cls() const { return token(cls_index()); }
    Tensor h_reg() const { return token(reg_index()); }
    Tensor attn_row(int i) const { return row(attn, i); }
};

class Model {
public:
    Model(ModelConfig cfg, Vocabulary vocab);

    const ModelConfig& config() const { return cfg_; }
    const Vocabulary& vocab() const { return tokenizer_.vocab(); }
    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }

    void init_params(std::uint64_t seed) { store_.init_all(seed); }

    // Starts a fresh graph over the shared parameters. Callers keep the ctx
    // alive for the whole forward/backward of one sample.
    RunCtx ctx(bool training, std::mt19937_64* dropout_rng = nullptr);

    std::vector<int> tokenize(const std::string& phrase) const;
    VisualFeatureGrid encode_image(const ImageTensor& img, RunCtx& rc) const;
    TextFeatures encode_phrase(const std::vector<int>& ids, RunCtx& rc) const;
    FusedOutput fuse(const VisualFeatureGrid& v, const TextFeatures& t, RunCtx& rc) const;
    Tensor predict_box(const Tensor& h_reg, RunCtx& rc) const;  // 1x4 cxcywh in (0,1)

    struct Forward {
        Tensor pred;        // 1x4 cxcywh, normalized
        BoundingBox box;    // same values as a BoundingBox
        FusedOutput fused;
    };
    Forward forward(const ImageTensor& img, const std::string& phrase, RunCtx& rc) const;

    void save_checkpoint(const std::string& path, const nlohmann::json& extra = {}) const;
    static Model load_checkpoint(const std::string& path, nlohmann::json* extra_out = nullptr);

private:
    ModelConfig cfg_;
    Tokenizer tokenizer_;
    ParamStore store_;

    // vision backbone
    std::vector<std::unique_ptr<Conv2d>> stem_;
    std::unique_ptr<LayerNorm> stem_norm_;
    std::vector<std::unique_ptr<ResidualBlock>> blocks_;
    std::unique_ptr<Linear> vis_proj_;          // backbone channels -> vision_width
    ParamId vis_pos_ = 0;                       // n_visual x vision_width
    std::vector<std::unique_ptr<EncoderLayer>> vis_layers_;

    // text encoder
    ParamId tok_embed_ = 0;                     // vocab x text_width
    ParamId txt_pos_ = 0;                       // max_text_len x text_width
    std::vector<std::unique_ptr<EncoderLayer>> txt_layers_;

    // fusion
    std::unique_ptr<Linear> fuse_vis_;          // vision_width -> fused_width
    std::unique_ptr<Linear> fuse_txt_;          // text_width -> fused_width
    ParamId reg_token_ = 0;                     // 1 x fused_width
    ParamId fuse_pos_ = 0;                      // n_fused x fused_width
    std::vector<std::unique_ptr<EncoderLayer>> fuse_layers_;

    // grounding head
    std::unique_ptr<Linear> head1_, head2_, head3_;

    void build();
};

}  // namespace grounder
