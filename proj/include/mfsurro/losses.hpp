#pragma once

#include <string>
#include <vector>

#include "mfsurro/autodiff.hpp"
#include "mfsurro/error.hpp"
#include "mfsurro/fdm.hpp"
#include "mfsurro/field.hpp"

namespace mfsurro {

/// Mean absolute error over batch and pixels.
template <class T>
Var loss_mae(Tape<T>& tape, Var pred, const Tensor<T>& target) {
  if (!(tape.value(pred).shape == target.shape))
    throw ShapeError("loss_mae shape mismatch: " + to_string(tape.value(pred).shape) + " vs " +
                     to_string(target.shape));
  return mean_abs_error(tape, pred, target);
}

/// Per-sample source and boundary closure for the physics loss.
struct PhysicsInput {
  ScalarField intensity;
  BoundarySpec bc;
};

/// Physics loss: mean |J(u) - u| where J is the one-step Jacobi
/// reconstruction from neighbors and source, held constant (stop-gradient).
/// `rise` is the prediction as T - T0 in kelvin, shape (b, 1, n, n); working
/// relative to T0 keeps float32 precision on the 1e-2 K scale of the
/// residual. The value equals the same mean on absolute temperatures.
template <class T>
Var loss_physics(Tape<T>& tape, Var rise, const std::vector<const PhysicsInput*>& inputs) {
  const Tensor<T>& U = tape.value(rise);
  const Shape s = U.shape;
  if (s.c != 1 || static_cast<std::size_t>(s.n) != inputs.size())
    throw ShapeError("loss_physics expects (b,1,n,n) with one input per sample, got " + to_string(s));
  Tensor<T> target(s);
  for (int b = 0; b < s.n; ++b) {
    const PhysicsInput& in = *inputs[b];
    if (in.intensity.n() != s.h || s.h != s.w)
      throw GridMismatchError("loss_physics prediction " + to_string(s) + " does not match the " +
                              std::to_string(in.intensity.n()) + "-grid source");
    ScalarField u(in.intensity.grid);
    const T* p = U.plane(b, 0);
    for (std::size_t i = 0; i < u.values.size(); ++i) u.values[i] = static_cast<double>(p[i]);
    BoundarySpec rel = in.bc;
    rel.hole_temp = 0.0;
    const ScalarField j = jacobi_target(u, in.intensity, rel);
    T* t = target.plane(b, 0);
    for (std::size_t i = 0; i < j.values.size(); ++i) t[i] = static_cast<T>(j.values[i]);
  }
  return mean_abs_error(tape, rise, target);
}

/// Scalar physics loss of one absolute temperature field.
inline double physics_loss_value(const ScalarField& T, const ScalarField& intensity, const BoundarySpec& bc) {
  const ScalarField j = jacobi_target(T, intensity, bc);
  double s = 0.0;
  for (std::size_t i = 0; i < T.values.size(); ++i) s += std::abs(j.values[i] - T.values[i]);
  return s / static_cast<double>(T.values.size());
}

}  // namespace mfsurro
