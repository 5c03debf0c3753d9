#include "reinjectr/featureio.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "reinjectr/binary_io.hpp"

namespace reinjectr {

namespace {

constexpr char kDumpMagic[4] = {'P', 'R', 'F', 'D'};
constexpr std::uint16_t kDumpVersion = 1;
constexpr std::uint8_t kFlagLabels = 0x01;

constexpr std::uint8_t kLabelCategoryMask = 0x0F;
constexpr std::uint8_t kLabelPromptStart = 0x40;
constexpr std::uint8_t kLabelTestSplit = 0x80;

std::string fmt9(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

}  // namespace

DumpLabels labels_from_corpus(const LabeledTokenCorpus& corpus) {
    DumpLabels labels;
    for (const auto& p : corpus.prompts) {
        for (std::size_t t = 0; t < p.tokens.size(); ++t) {
            labels.categories.push_back(p.labels[t]);
            labels.is_test.push_back(p.is_test);
            labels.prompt_start.push_back(t == 0);
        }
    }
    return labels;
}

LabeledTokenCorpus corpus_from_labels(const DumpLabels& labels) {
    LabeledTokenCorpus corpus;
    for (std::size_t i = 0; i < labels.categories.size(); ++i) {
        if (labels.prompt_start[i] || corpus.prompts.empty()) {
            TokenizedPrompt tp;
            tp.is_test = labels.is_test[i];
            corpus.prompts.push_back(std::move(tp));
        }
        TokenizedPrompt& tp = corpus.prompts.back();
        tp.tokens.push_back("tok" + std::to_string(i));
        tp.labels.push_back(labels.categories[i]);
    }
    return corpus;
}

void write_dump(const std::string& path, const FeatureStack& stack,
                const DumpLabels* labels, DumpDtype dtype) {
    stack.validate();
    require(stack.layer_count() <= 0xFFFF, "write_dump: too many layers");
    if (labels != nullptr)
        require(labels->categories.size() == stack.tokens() &&
                    labels->is_test.size() == stack.tokens() &&
                    labels->prompt_start.size() == stack.tokens(),
                "write_dump: label block size mismatch");

    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot open for writing: " + path);

    ByteWriter w(out);
    w.bytes(kDumpMagic, 4);
    w.u16(kDumpVersion);
    w.u16(static_cast<std::uint16_t>(stack.layer_count()));
    w.u32(static_cast<std::uint32_t>(stack.tokens()));
    w.u32(static_cast<std::uint32_t>(stack.width()));
    w.u8(static_cast<std::uint8_t>(dtype));
    w.f32(stack.timestep);
    w.u8(labels != nullptr ? kFlagLabels : 0);

    for (const Matrix& layer : stack.text) {
        if (dtype == DumpDtype::f64) {
            for (double v : layer.data) w.f64(v);
        } else {
            for (double v : layer.data) w.f32(static_cast<float>(v));
        }
    }
    if (labels != nullptr) {
        for (std::size_t i = 0; i < labels->categories.size(); ++i) {
            std::uint8_t b = static_cast<std::uint8_t>(labels->categories[i]);
            if (labels->prompt_start[i]) b |= kLabelPromptStart;
            if (labels->is_test[i]) b |= kLabelTestSplit;
            w.u8(b);
        }
    }
    w.flush();
    if (!out) throw io_error("write failed: " + path);
}

DumpContents read_dump(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error("cannot open: " + path);
    ByteReader r(in, path);

    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, kDumpMagic, 4) != 0)
        throw corrupt_dump("not a PRFD file: " + path);
    std::uint16_t version = r.u16();
    if (version != kDumpVersion)
        throw unsupported_version("unsupported PRFD version " + std::to_string(version));

    std::uint16_t layers = r.u16();
    std::uint32_t tokens = r.u32();
    std::uint32_t width = r.u32();
    std::uint8_t dtype_tag = r.u8();
    if (dtype_tag > 1) throw corrupt_dump("unknown dtype tag in " + path);
    DumpDtype dtype = static_cast<DumpDtype>(dtype_tag);
    float timestep = r.f32();
    std::uint8_t flags = r.u8();
    if (layers == 0 || tokens == 0 || width == 0)
        throw corrupt_dump("empty dump dimensions in " + path);

    DumpContents contents;
    contents.stack.timestep = timestep;
    contents.stack.text.reserve(layers);
    for (std::uint16_t l = 0; l < layers; ++l) {
        Matrix m(tokens, width);
        if (dtype == DumpDtype::f64) {
            for (double& v : m.data) v = r.f64();
        } else {
            for (double& v : m.data) v = static_cast<double>(r.f32());
        }
        contents.stack.text.push_back(std::move(m));
    }

    if (flags & kFlagLabels) {
        DumpLabels labels;
        labels.categories.reserve(tokens);
        for (std::uint32_t i = 0; i < tokens; ++i) {
            std::uint8_t b = r.u8();
            std::uint8_t cat = b & kLabelCategoryMask;
            if (cat >= kCategoryCount) throw corrupt_dump("bad category byte in " + path);
            labels.categories.push_back(static_cast<TokenCategory>(cat));
            labels.prompt_start.push_back((b & kLabelPromptStart) != 0);
            labels.is_test.push_back((b & kLabelTestSplit) != 0);
        }
        contents.labels = std::move(labels);
    }
    return contents;
}

namespace {

void write_text_file(const std::string& path, const std::string& body) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot open for writing: " + path);
    out << body;
    if (!out) throw io_error("write failed: " + path);
}

void check_finite(double v, const char* what) {
    if (!std::isfinite(v)) throw invalid_input(std::string("export_table: non-finite ") + what);
}

}  // namespace

void export_table(const DriftReport& report, TableFormat format, const std::string& path) {
    require(!report.layer_ids.empty(), "export_table: empty drift report");
    for (double s : report.cknna_scores) check_finite(s, "cknna score");

    if (format == TableFormat::csv) {
        std::ostringstream os;
        os << "layer,token,pc1,pc2\n";
        for (std::size_t l = 0; l < report.pca_coords.size(); ++l) {
            const Matrix& coords = report.pca_coords[l];
            for (std::size_t i = 0; i < coords.rows; ++i) {
                double pc1 = coords.cols > 0 ? coords(i, 0) : 0.0;
                double pc2 = coords.cols > 1 ? coords(i, 1) : 0.0;
                os << report.layer_ids[l] << ',' << i << ',' << fmt9(pc1) << ',' << fmt9(pc2)
                   << '\n';
            }
        }
        write_text_file(path, os.str());
        return;
    }

    nlohmann::ordered_json j;
    j["k"] = report.k;
    j["kernel_eps"] = report.kernel_eps;
    j["pca_dims"] = report.pca_dims;
    j["layers"] = report.layer_ids;
    j["cknna"] = report.cknna_scores;
    j["pca_centroids"] = report.pca_centroids;
    write_text_file(path, j.dump(2) + "\n");
}

void export_table(const RecoverabilityCurve& curve, TableFormat format,
                  const std::string& path) {
    require(!curve.layer_ids.empty(), "export_table: empty recoverability curve");

    if (format == TableFormat::csv) {
        std::ostringstream os;
        os << "layer,category,accuracy,support\n";
        for (std::size_t l = 0; l < curve.layer_ids.size(); ++l) {
            const Recoverability& rec = curve.per_layer[l];
            check_finite(rec.overall, "accuracy");
            os << curve.layer_ids[l] << ",overall," << fmt9(rec.overall) << ',' << rec.total
               << '\n';
            for (std::size_t c = 0; c < kCategoryCount; ++c) {
                const CategoryAccuracy& ca = rec.per_category[c];
                if (!ca.defined) continue;  // absent category: omitted, not 0
                os << curve.layer_ids[l] << ',' << category_name(static_cast<TokenCategory>(c))
                   << ',' << fmt9(ca.accuracy) << ',' << ca.support << '\n';
            }
        }
        write_text_file(path, os.str());
        return;
    }

    nlohmann::ordered_json j;
    j["config"] = {{"hidden_width", curve.config.hidden_width},
                   {"learning_rate", curve.config.learning_rate},
                   {"batch_size", curve.config.batch_size},
                   {"epochs", curve.config.epochs},
                   {"seed", curve.config.seed}};
    nlohmann::ordered_json layers = nlohmann::ordered_json::array();
    for (std::size_t l = 0; l < curve.layer_ids.size(); ++l) {
        const Recoverability& rec = curve.per_layer[l];
        nlohmann::ordered_json entry;
        entry["layer"] = curve.layer_ids[l];
        entry["overall"] = rec.overall;
        entry["support"] = rec.total;
        nlohmann::ordered_json cats;
        for (std::size_t c = 0; c < kCategoryCount; ++c) {
            const CategoryAccuracy& ca = rec.per_category[c];
            if (!ca.defined) continue;
            cats[category_name(static_cast<TokenCategory>(c))] = {
                {"accuracy", ca.accuracy}, {"support", ca.support}};
        }
        entry["categories"] = std::move(cats);
        layers.push_back(std::move(entry));
    }
    j["layers"] = std::move(layers);
    write_text_file(path, j.dump(2) + "\n");
}

void export_table(const CostReport& report, TableFormat format, const std::string& path) {
    check_finite(report.total_flops, "flops");

    nlohmann::ordered_json j;
    j["assumptions"] = {{"tokens", report.assumptions.tokens},
                        {"width", report.assumptions.width},
                        {"steps", report.assumptions.steps},
                        {"cfg_multiplier", report.assumptions.cfg_multiplier},
                        {"applications", report.assumptions.applications()},
                        {"block_flops_ref", report.assumptions.block_flops_ref}};
    j["per_target_block_flops"] = {{"plain_add", report.plain_add_flops},
                                   {"anchoring", report.anchoring_flops},
                                   {"rotation", report.rotation_flops},
                                   {"total", report.total_flops}};
    j["relative_flops"] = report.relative_flops;
    j["memory_bytes"] = {{"origin_copy", report.origin_copy_bytes},
                         {"anchor_buffers", report.anchor_buffer_bytes},
                         {"rotation_matrix", report.rotation_matrix_bytes},
                         {"total", report.total_bytes}};
    j["target_blocks"] = report.target_blocks;

    if (format == TableFormat::json) {
        write_text_file(path, j.dump(2) + "\n");
        return;
    }
    std::ostringstream os;
    os << "key,value\n";
    for (auto& [section, body] : j.items()) {
        if (body.is_object()) {
            for (auto& [k, v] : body.items())
                os << section << '.' << k << ',' << (v.is_number_float() ? fmt9(v.get<double>()) : v.dump())
                   << '\n';
        } else {
            os << section << ','
               << (body.is_number_float() ? fmt9(body.get<double>()) : body.dump()) << '\n';
        }
    }
    write_text_file(path, os.str());
}

}  // namespace reinjectr
