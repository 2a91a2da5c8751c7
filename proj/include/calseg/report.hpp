#pragma once

// Figures and metric tables. Everything here only reads its inputs.

#include <filesystem>
#include <span>
#include <vector>

#include <json.hpp>

#include "calseg/datagen.hpp"
#include "calseg/metrics.hpp"
#include "calseg/png_io.hpp"

namespace calseg {

/// Two rows of H x W cells and 1 + max(A, S) columns: the input patch on the
/// left of both rows, annotations on top, samples below. Masks are drawn as
/// 0/255; unused cells stay black. Writes `path` and returns the image.
GrayImage render_sample_grid(const ImagePatch& x, std::span<const BinaryMask> annotations,
                             std::span<const BinaryMask> samples, const std::filesystem::path& path);

/// Nearest-rank percentile (q in [0, 100]) of the concatenated maps.
double percentile(std::span<const Tensor* const> maps, double q);

/// Four panels side by side: input, grader variance, aleatoric, epistemic.
/// Grader variance and aleatoric share the 99th percentile of their union as
/// the clipping threshold; epistemic uses its own. Values at or above the
/// threshold render as 255; a non-positive threshold renders black.
GrayImage render_uncertainty_panel(const ImagePatch& x, const Tensor& gt_variance, const Tensor& aleatoric,
                                   const Tensor& epistemic, const std::filesystem::path& path);

/// One row per report (label, split, samples, seeds, GED^2 and NCC mean/std
/// across seeds) written to <prefix>.csv and <prefix>.json. Reports must share
/// split and sample count; otherwise ValidationError.
nlohmann::json emit_tables(std::span<const MetricsReport> reports, const std::filesystem::path& prefix);

}  // namespace calseg
