#pragma once

#include <array>
#include <cstdint>
#include <filesystem>

#include "cause/tensor_math.hpp"

namespace cause {

/// Parameters of the MLP segmentation head:
///   hidden = act(T W1 + b1)       c -> c
///   Y      = hidden W2 + b2       c -> r   (segmentation features)
///   Z      = Y Wp + bp            r -> r   (projection, training loss only)
/// Weights are stored input-major (fan_in x fan_out); biases as 1 x fan_out.
struct HeadParams {
  Matrix w1, b1, w2, b2, wp, bp;

  static constexpr std::size_t kTensors = 6;
  std::array<Matrix*, kTensors> tensors() { return {&w1, &b1, &w2, &b2, &wp, &bp}; }
  std::array<const Matrix*, kTensors> tensors() const { return {&w1, &b1, &w2, &b2, &wp, &bp}; }
  static const char* tensor_name(std::size_t i);

  friend bool operator==(const HeadParams&, const HeadParams&) = default;
};

enum class Activation { Relu, Identity };

struct MlpHead {
  std::size_t c = 0;
  std::size_t r = 0;
  Activation activation = Activation::Relu;
  HeadParams params;
};

/// EMA copy of a student head. Never receives gradients.
struct TeacherHead {
  MlpHead head;
  double lambda = 0.99;
};

/// Weights ~ Uniform(+-1/sqrt(fan_in)), biases zero.
MlpHead init_head(std::size_t c, std::size_t r, std::uint64_t seed);
MlpHead zero_head(std::size_t c, std::size_t r);

enum class HeadMode { Train, Infer };

struct ForwardCache {
  Matrix input;
  Matrix pre_activation;
  Matrix hidden;
  Matrix output;  ///< Y
};

struct HeadOutput {
  Matrix y;          ///< hw x r
  Matrix projected;  ///< hw x r in train mode, empty in infer mode
  ForwardCache cache;
};

/// Infer mode skips the projection entirely.
HeadOutput head_forward(const Matrix& features, const MlpHead& head, HeadMode mode);

struct HeadGradients {
  HeadParams params;
  Matrix input;  ///< dL/dT
};

/// Reverse pass. `grad_projected` (dL/dZ) may be empty when only Y feeds the
/// loss; `grad_y` (dL/dY, added to what flows back from Z) may be empty too.
HeadGradients head_backward(const MlpHead& head, const ForwardCache& cache, const Matrix& grad_projected,
                            const Matrix& grad_y = {});

/// teacher <- lambda * teacher + (1 - lambda) * student, elementwise.
void ema_update(TeacherHead& teacher, const MlpHead& student, double lambda);
inline void ema_update(TeacherHead& teacher, const MlpHead& student) { ema_update(teacher, student, teacher.lambda); }

/// Squared L2 distance over all parameter tensors.
double parameter_distance_sq(const HeadParams& a, const HeadParams& b);

/// Per-tensor Adam state for a head.
struct HeadOptimizer {
  std::array<AdamState, HeadParams::kTensors> states;
  double lr = 0.001;

  explicit HeadOptimizer(const MlpHead& head, double lr_ = 0.001);
  void step(MlpHead& head, const HeadParams& grads);
};

// .causehead: "CAUH" u32 version u32 c u32 r u8 activation f64 lambda
//             student {w1 b1 w2 b2 wp bp} teacher {w1 b1 w2 b2 wp bp}, f32 each
void save_heads(const MlpHead& student, const TeacherHead& teacher, const std::filesystem::path& path);
void load_heads(const std::filesystem::path& path, MlpHead& student, TeacherHead& teacher);

}  // namespace cause
