#pragma once

#include <optional>
#include <string>
#include <vector>

#include "reinjectr/feature_stack.hpp"
#include "reinjectr/metrics.hpp"
#include "reinjectr/probe.hpp"
#include "reinjectr/reinject.hpp"

namespace reinjectr {

// "PRFD" feature dump, little-endian throughout:
//   magic "PRFD" | version u16 | layer count u16 | tokens u32 | width u32
//   | dtype u8 (0 = f32, 1 = f64) | timestep f32 | flags u8
// followed by layer-major row-major payload, then (flags bit 0) one label
// byte per token: category in bits 0-3, bit 6 = prompt start, bit 7 = test
// split. Third parties can produce these from any framework.
enum class DumpDtype : std::uint8_t { f32 = 0, f64 = 1 };

struct DumpLabels {
    std::vector<TokenCategory> categories;
    std::vector<bool> is_test;
    std::vector<bool> prompt_start;
};

DumpLabels labels_from_corpus(const LabeledTokenCorpus& corpus);
// Placeholder token strings; grouping and split flags are preserved.
LabeledTokenCorpus corpus_from_labels(const DumpLabels& labels);

void write_dump(const std::string& path, const FeatureStack& stack,
                const DumpLabels* labels = nullptr, DumpDtype dtype = DumpDtype::f64);

struct DumpContents {
    FeatureStack stack;
    std::optional<DumpLabels> labels;
};

DumpContents read_dump(const std::string& path);

enum class TableFormat { csv, json };

// Stable column order, floats printed with 9 significant digits.
void export_table(const DriftReport& report, TableFormat format, const std::string& path);
void export_table(const RecoverabilityCurve& curve, TableFormat format, const std::string& path);
void export_table(const CostReport& report, TableFormat format, const std::string& path);

}  // namespace reinjectr
