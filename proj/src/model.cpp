#include "grounder/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace grounder {

namespace {

int heads_for(int width) { return std::max(1, width / 64); }

void require(bool ok, const std::string& what) {
    if (!ok) throw ConfigError("model config: " + what);
}

}  // namespace

ModelConfig ModelConfig::toy() { return ModelConfig{}; }

ModelConfig ModelConfig::full() {
    ModelConfig c;
    c.image_size = 640;
    c.image_channels = 3;
    c.vision_backbone_channels = 64;
    c.vision_stride = 32;
    c.vision_tf_layers = 6;
    c.vision_width = 256;
    c.text_vocab_size = 30522;
    c.text_tf_layers = 12;
    c.text_width = 768;
    c.max_text_len = 20;
    c.fused_width = 256;
    c.vlt_layers = 6;
    c.vlt_heads = 8;
    c.mlp_hidden = 256;
    c.dropout = 0.1;
    return c;
}

void ModelConfig::validate() const {
    require(image_size > 0, "image_size must be positive");
    require(image_channels == 1 || image_channels == 3, "image_channels must be 1 or 3");
    require(vision_stride == 4 || vision_stride == 8 || vision_stride == 16 || vision_stride == 32,
            "vision_stride must be one of 4, 8, 16, 32");
    require(image_size % vision_stride == 0, "image_size must be divisible by vision_stride");
    require(grid_dim() >= 2, "feature grid must be at least 2x2");
    require(vision_backbone_channels >= 1, "vision_backbone_channels must be positive");
    require(vision_width > 0 && text_width > 0 && fused_width > 0, "encoder widths must be positive");
    require(vision_tf_layers >= 0 && text_tf_layers >= 0 && vlt_layers >= 0,
            "layer counts must be non-negative");
    // 0 defers to the vocabulary; the Model constructor re-validates after filling it in.
    require(text_vocab_size == 0 || text_vocab_size > SpecialTokens::UNK,
            "text_vocab_size too small");
    require(max_text_len >= 3, "max_text_len must fit [CLS], one word and [SEP]");
    require(vlt_heads >= 1, "vlt_heads must be positive");
    require(fused_width % vlt_heads == 0, "fused_width must be divisible by vlt_heads");
    require(mlp_hidden > 0, "mlp_hidden must be positive");
    require(dropout >= 0.0 && dropout < 1.0, "dropout must be in [0, 1)");
}

nlohmann::json ModelConfig::to_json() const {
    return nlohmann::json{
        {"image_size", image_size},
        {"image_channels", image_channels},
        {"vision_backbone_channels", vision_backbone_channels},
        {"vision_stride", vision_stride},
        {"vision_tf_layers", vision_tf_layers},
        {"vision_width", vision_width},
        {"text_vocab_size", text_vocab_size},
        {"text_tf_layers", text_tf_layers},
        {"text_width", text_width},
        {"max_text_len", max_text_len},
        {"fused_width", fused_width},
        {"vlt_layers", vlt_layers},
        {"vlt_heads", vlt_heads},
        {"mlp_hidden", mlp_hidden},
        {"dropout", dropout},
    };
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig c;
    const ModelConfig defaults;
    auto geti = [&](const char* k, int d) { return j.value(k, d); };
    c.image_size = geti("image_size", defaults.image_size);
    c.image_channels = geti("image_channels", defaults.image_channels);
    c.vision_backbone_channels = geti("vision_backbone_channels", defaults.vision_backbone_channels);
    c.vision_stride = geti("vision_stride", defaults.vision_stride);
    c.vision_tf_layers = geti("vision_tf_layers", defaults.vision_tf_layers);
    c.vision_width = geti("vision_width", defaults.vision_width);
    c.text_vocab_size = geti("text_vocab_size", defaults.text_vocab_size);
    c.text_tf_layers = geti("text_tf_layers", defaults.text_tf_layers);
    c.text_width = geti("text_width", defaults.text_width);
    c.max_text_len = geti("max_text_len", defaults.max_text_len);
    c.fused_width = geti("fused_width", defaults.fused_width);
    c.vlt_layers = geti("vlt_layers", defaults.vlt_layers);
    c.vlt_heads = geti("vlt_heads", defaults.vlt_heads);
    c.mlp_hidden = geti("mlp_hidden", defaults.mlp_hidden);
    c.dropout = j.value("dropout", defaults.dropout);
    return c;
}

Model::Model(ModelConfig cfg, Vocabulary vocab)
    : cfg_(cfg), tokenizer_(std::move(vocab)) {
    if (cfg_.text_vocab_size == 0) cfg_.text_vocab_size = tokenizer_.vocab().size();
    if (cfg_.text_vocab_size < tokenizer_.vocab().size())
        throw ConfigError("text_vocab_size smaller than the vocabulary (" +
                          std::to_string(cfg_.text_vocab_size) + " < " +
                          std::to_string(tokenizer_.vocab().size()) + ")");
    cfg_.validate();
    build();
}

void Model::build() {
    // Backbone: a strided stem then three residual stages. Strided stages
    // double the channel count so total downsampling matches vision_stride.
    int num_strided = 0;
    for (int s = cfg_.vision_stride; s > 2 && num_strided < 3; s /= 2) ++num_strided;
    const int stem_stride = cfg_.vision_stride >> num_strided;
    const int stem_kernel = stem_stride > 2 ? 5 : 3;

    int ch = cfg_.vision_backbone_channels;
    stem_.push_back(std::make_unique<Conv2d>(store_, "vision.stem", cfg_.image_channels, ch,
                                             stem_kernel, stem_stride, (stem_kernel - 1) / 2));
    stem_norm_ = std::make_unique<LayerNorm>(store_, "vision.stem.norm", ch, ParamGroup::VISION);
    for (int i = 0; i < 3; ++i) {
        const int stride = i < num_strided ? 2 : 1;
        const int out_ch = stride == 2 ? ch * 2 : ch;
        blocks_.push_back(std::make_unique<ResidualBlock>(
            store_, "vision.block" + std::to_string(i), ch, out_ch, stride));
        ch = out_ch;
    }
    vis_proj_ = std::make_unique<Linear>(store_, "vision.proj", ch, cfg_.vision_width,
                                         ParamGroup::VISION);
    vis_pos_ = store_.add("vision.pos", cfg_.n_visual(), cfg_.vision_width, ParamGroup::VISION,
                          InitKind::EMBEDDING);
    for (int i = 0; i < cfg_.vision_tf_layers; ++i)
        vis_layers_.push_back(std::make_unique<EncoderLayer>(
            store_, "vision.layer" + std::to_string(i), cfg_.vision_width,
            heads_for(cfg_.vision_width), 2 * cfg_.vision_width, ParamGroup::VISION));

    tok_embed_ = store_.add("text.embed", cfg_.text_vocab_size, cfg_.text_width, ParamGroup::TEXT,
                            InitKind::EMBEDDING);
    txt_pos_ = store_.add("text.pos", cfg_.max_text_len, cfg_.text_width, ParamGroup::TEXT,
                          InitKind::EMBEDDING);
    for (int i = 0; i < cfg_.text_tf_layers; ++i)
        txt_layers_.push_back(std::make_unique<EncoderLayer>(
            store_, "text.layer" + std::to_string(i), cfg_.text_width,
            heads_for(cfg_.text_width), 2 * cfg_.text_width, ParamGroup::TEXT));

    fuse_vis_ = std::make_unique<Linear>(store_, "fuse.proj_v", cfg_.vision_width,
                                         cfg_.fused_width, ParamGroup::VLT);
    fuse_txt_ = std::make_unique<Linear>(store_, "fuse.proj_t", cfg_.text_width,
                                         cfg_.fused_width, ParamGroup::VLT);
    reg_token_ = store_.add("fuse.reg", 1, cfg_.fused_width, ParamGroup::VLT, InitKind::EMBEDDING);
    fuse_pos_ = store_.add("fuse.pos", cfg_.n_fused(), cfg_.fused_width, ParamGroup::VLT,
                           InitKind::EMBEDDING);
    for (int i = 0; i < cfg_.vlt_layers; ++i)
        fuse_layers_.push_back(std::make_unique<EncoderLayer>(
            store_, "fuse.layer" + std::to_string(i), cfg_.fused_width, cfg_.vlt_heads,
            2 * cfg_.fused_width, ParamGroup::VLT));

    head1_ = std::make_unique<Linear>(store_, "head.fc1", cfg_.fused_width, cfg_.mlp_hidden,
                                      ParamGroup::VLT);
    head2_ = std::make_unique<Linear>(store_, "head.fc2", cfg_.mlp_hidden, cfg_.mlp_hidden,
                                      ParamGroup::VLT);
    head3_ = std::make_unique<Linear>(store_, "head.fc3", cfg_.mlp_hidden, 4, ParamGroup::VLT);
}

RunCtx Model::ctx(bool training, std::mt19937_64* dropout_rng) {
    if (training && cfg_.dropout > 0.0 && dropout_rng == nullptr)
        throw ConfigError("training context needs a dropout rng");
    store_.begin_tape(training);
    RunCtx rc;
    rc.store = &store_;
    rc.training = training;
    rc.dropout = cfg_.dropout;
    rc.dropout_rng = dropout_rng;
    return rc;
}

std::vector<int> Model::tokenize(const std::string& phrase) const {
    return tokenizer_.encode(phrase, cfg_.max_text_len);
}

VisualFeatureGrid Model::encode_image(const ImageTensor& img, RunCtx& rc) const {
    if (img.h != cfg_.image_size || img.w != cfg_.image_size || img.c != cfg_.image_channels)
        throw ShapeError("encode_image: expected " + std::to_string(cfg_.image_size) + "x" +
                         std::to_string(cfg_.image_size) + "x" + std::to_string(cfg_.image_channels) +
                         " input, got " + std::to_string(img.h) + "x" + std::to_string(img.w) + "x" +
                         std::to_string(img.c));
    SpatialTensor x{Tensor::constant(img.px), img.h, img.w, img.c};
    x = (*stem_[0])(rc, x);
    x.t = relu((*stem_norm_)(rc, x.t));
    for (const auto& b : blocks_) x = (*b)(rc, x);

    const int g = cfg_.grid_dim();
    if (x.h != g || x.w != g)
        throw ShapeError("backbone produced a " + std::to_string(x.h) + "x" + std::to_string(x.w) +
                         " grid, expected " + std::to_string(g) + "x" + std::to_string(g));

    Tensor tokens = (*vis_proj_)(rc, x.t) + rc.p(vis_pos_);
    const std::vector<bool> all(static_cast<size_t>(cfg_.n_visual()), true);
    for (const auto& l : vis_layers_) tokens = (*l)(rc, tokens, all);
    return VisualFeatureGrid{tokens, g, g};
}

TextFeatures Model::encode_phrase(const std::vector<int>& ids, RunCtx& rc) const {
    if (static_cast<int>(ids.size()) != cfg_.max_text_len)
        throw ShapeError("encode_phrase: expected " + std::to_string(cfg_.max_text_len) +
                         " token ids, got " + std::to_string(ids.size()));
    std::vector<bool> attend(ids.size());
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= cfg_.text_vocab_size)
            throw InputError("token id " + std::to_string(ids[i]) + " outside the vocabulary");
        attend[i] = ids[i] != SpecialTokens::PAD;
    }
    Tensor tokens = rows_select(rc.p(tok_embed_), ids) + rc.p(txt_pos_);
    for (const auto& l : txt_layers_) tokens = (*l)(rc, tokens, attend);
    return TextFeatures{tokens, attend, ids};
}

FusedOutput Model::fuse(const VisualFeatureGrid& v, const TextFeatures& t, RunCtx& rc) const {
    if (v.rows * v.cols != cfg_.n_visual() || t.tokens.rows() != cfg_.max_text_len)
        throw ShapeError("fuse: encoder outputs do not match the configured sequence layout");

    Tensor pv = (*fuse_vis_)(rc, v.tokens);
    Tensor pt = (*fuse_txt_)(rc, t.tokens);
    Tensor seq = concat_rows({pv, pt, rc.p(reg_token_)}) + rc.p(fuse_pos_);

    FusedOutput out;
    out.n_visual = cfg_.n_visual();
    out.n_text = cfg_.max_text_len;
    out.grid_rows = v.rows;
    out.grid_cols = v.cols;
    out.key_mask.assign(static_cast<size_t>(cfg_.n_fused()), true);
    for (int i = 0; i < cfg_.max_text_len; ++i)
        out.key_mask[static_cast<size_t>(out.text_begin() + i)] = t.attend[static_cast<size_t>(i)];

    Tensor attn;
    for (size_t i = 0; i < fuse_layers_.size(); ++i) {
        const bool last = i + 1 == fuse_layers_.size();
        seq = (*fuse_layers_[i])(rc, seq, out.key_mask, last ? &attn : nullptr);
    }
    if (fuse_layers_.empty()) {
        // No attention exists without fusion layers; substitute the uniform
        // distribution over attendable keys so downstream invariants hold.
        int n_open = 0;
        for (bool b : out.key_mask) n_open += b ? 1 : 0;
        Mat a = Mat::Zero(cfg_.n_fused(), cfg_.n_fused());
        for (int i = 0; i < cfg_.n_fused(); ++i)
            for (int j = 0; j < cfg_.n_fused(); ++j)
                if (out.key_mask[static_cast<size_t>(j)]) a(i, j) = 1.0 / n_open;
        attn = Tensor::constant(std::move(a));
    }
    out.tokens = seq;
    out.attn = attn;
    return out;
}

Tensor Model::predict_box(const Tensor& h_reg, RunCtx& rc) const {
    Tensor h = relu((*head1_)(rc, h_reg));
    h = relu((*head2_)(rc, h));
    return sigmoid((*head3_)(rc, h));
}

Model::Forward Model::forward(const ImageTensor& img, const std::string& phrase, RunCtx& rc) const {
    const auto ids = tokenize(phrase);
    auto vis = encode_image(img, rc);
    auto txt = encode_phrase(ids, rc);
    auto fused = fuse(vis, txt, rc);
    Tensor pred = predict_box(fused.h_reg(), rc);
    const Mat& p = pred.value();
    BoundingBox box = BoundingBox::cxcywh(p(0, 0), p(0, 1), p(0, 2), p(0, 3), Frame::normalized());
    return Forward{pred, box, std::move(fused)};
}

namespace {
constexpr char kMagic[8] = {'G', 'R', 'N', 'D', 'C', 'K', 'P', '1'};
}

void Model::save_checkpoint(const std::string& path, const nlohmann::json& extra) const {
    nlohmann::json header;
    header["config"] = cfg_.to_json();
    header["vocab"] = vocab().to_json();
    header["extra"] = extra;
    auto& tens = header["tensors"] = nlohmann::json::array();
    for (size_t i = 0; i < store_.size(); ++i) {
        const auto& e = store_.entry(static_cast<int>(i));
        tens.push_back({{"name", e.name}, {"rows", e.value.rows()}, {"cols", e.value.cols()}});
    }
    const std::string hs = header.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write checkpoint: " + path);
    f.write(kMagic, sizeof(kMagic));
    const std::uint64_t hlen = hs.size();
    f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (size_t i = 0; i < store_.size(); ++i) {
        const auto& v = store_.entry(static_cast<int>(i)).value;
        f.write(reinterpret_cast<const char*>(v.data()),
                static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(v.size())));
    }
    if (!f) throw DataError("short write while saving checkpoint: " + path);
}

Model Model::load_checkpoint(const std::string& path, nlohmann::json* extra_out) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open checkpoint: " + path);
    char magic[8];
    f.read(magic, sizeof(magic));
    if (!f || std::memcmp(magic, kMagic, sizeof(magic)) != 0)
        throw DataError("not a checkpoint file: " + path);
    std::uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    if (!f || hlen == 0 || hlen > (1u << 26)) throw DataError("corrupt checkpoint header: " + path);
    std::string hs(hlen, '\0');
    f.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (!f) throw DataError("truncated checkpoint header: " + path);

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hs);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("checkpoint header is not valid json: ") + e.what());
    }

    Model m(ModelConfig::from_json(header.at("config")), Vocabulary::from_json(header.at("vocab")));
    const auto& tens = header.at("tensors");
    if (tens.size() != m.store_.size())
        throw DataError("checkpoint holds " + std::to_string(tens.size()) + " tensors, model expects " +
                        std::to_string(m.store_.size()));
    for (size_t i = 0; i < m.store_.size(); ++i) {
        auto& e = m.store_.entry(static_cast<int>(i));
        const auto& t = tens[i];
        if (t.at("name").get<std::string>() != e.name ||
            t.at("rows").get<Eigen::Index>() != e.value.rows() ||
            t.at("cols").get<Eigen::Index>() != e.value.cols())
            throw DataError("checkpoint tensor mismatch at \"" + e.name + "\"");
        f.read(reinterpret_cast<char*>(e.value.data()),
               static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(e.value.size())));
        if (!f) throw DataError("truncated checkpoint payload at \"" + e.name + "\"");
    }
    if (extra_out) *extra_out = header.value("extra", nlohmann::json::object());
    return m;
}

}  // namespace grounder
