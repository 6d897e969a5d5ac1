#pragma once

#include <string>
#include <vector>

namespace mixsearch::verify {

/// Worst finite-difference error of one component, over its input and
/// every parameter.
struct GradRow {
  std::string name;
  double input_error = 0.0;
  double param_error = 0.0;
  double tolerance = 1e-4;

  double error() const { return input_error > param_error ? input_error : param_error; }
  bool pass() const { return error() <= tolerance; }
};

/// One row per catalog op, in catalog order, on a (2, 4, 8, 8) input with
/// four output channels.
std::vector<GradRow> op_gradcheck(double tolerance = 1e-4);

/// A relaxed normal cell mixing the full Normal-op list on two (2, 4, 8, 8)
/// inputs: both inputs, the edge logits and every cell parameter.
GradRow cell_gradcheck(double tolerance = 1e-4);

/// A relaxed three-level grid with every branch enabled on a (2, 4, 8, 8)
/// input: input, architecture logits and stem weights.
GradRow grid_gradcheck(double tolerance = 1e-4);

/// seg_loss with deep supervision on (2, 4, 8, 8) logits and soft targets.
GradRow loss_gradcheck(double tolerance = 1e-4);

}  // namespace mixsearch::verify
