#pragma once

#include "mvlfmm/model.hpp"
#include "mvlfmm/sim.hpp"

#include <string>

namespace mvlfmm {

/// Fit bundle directory: fpca.json, fits/k_###.json (one per score) and
/// meta.json. Doubles are written in shortest round-trip form, so a saved
/// and reloaded fit is bit-identical. Loading errors raise DataError.
void save_fit(const MvLfmmFit& fit, const std::string& dir);
MvLfmmFit load_fit(const std::string& dir);

/// Generator parameter file (JSON).
std::string generator_params_to_json(const GeneratorParams& params);
GeneratorParams generator_params_from_json(const std::string& text);
void save_generator_params(const GeneratorParams& params, const std::string& path);
GeneratorParams load_generator_params(const std::string& path);

std::string read_text_file(const std::string& path);
/// Writes `text` to `path`, creating parent directories.
void write_text_file(const std::string& path, const std::string& text);

}  // namespace mvlfmm
