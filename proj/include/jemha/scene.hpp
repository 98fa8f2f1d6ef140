#pragma once

#include <string>
#include <vector>

#include "jemha/tensor.hpp"

namespace jemha {

struct BoundingBox {
  double x_tl = 0.0, y_tl = 0.0, x_br = 0.0, y_br = 0.0;

  double width() const { return x_br - x_tl; }
  double height() const { return y_br - y_tl; }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (x_tl + x_br); }
  double cy() const { return 0.5 * (y_tl + y_br); }
};

double iou(const BoundingBox& a, const BoundingBox& b);

struct DetectedObject {
  int id = 0;  // unique within a scene
  BoundingBox box;
  std::vector<double> feature;  // o_i
  int category = 0;
  int supercategory = 0;
  double score = 1.0;
};

struct Scene {
  std::string id;
  double width = 0.0, height = 0.0;
  std::vector<DetectedObject> objects;

  const DetectedObject& object_by_id(int id) const;
  bool has_object(int id) const;
};

// At least one object, unique ids, valid in-image boxes, uniform feature
// dims, finite scores. Throws std::invalid_argument otherwise.
void validate_scene(const Scene& scene);

// [x_tl/W, y_tl/H, x_br/W, y_br/H, area/(W·H)]; degenerate or out-of-image
// boxes are an error.
std::vector<double> location_size(const BoundingBox& box, double width, double height);

// Greedy non-maximum suppression. Repeatedly keeps the highest-score
// remaining object (ties -> lower id) and drops the rest with IoU above
// the threshold. Returns kept ids in keep order.
std::vector<int> nms(const std::vector<DetectedObject>& objects, double iou_threshold = 0.7);

// Up to k NMS-surviving neighbor ids, ascending distance between box
// centers, ties by lower id. The target must itself survive NMS.
std::vector<int> knn_neighbors(const Scene& scene, int target_id, int k = 20, double iou_threshold = 0.7);

// δo_i: mean over neighbors of (o_i − o_j)/‖o_i − o_j‖. Near-identical
// features (norm < 1e-8) contribute a zero vector, as does an empty
// neighbor set.
std::vector<double> visual_diff(const std::vector<double>& target_feat,
                                const std::vector<std::vector<double>>& neighbor_feats);

// δl_i: mean over neighbors of [Δx_tl/w_i, Δy_tl/h_i, Δx_br/w_i, Δy_br/h_i,
// area_j/area_i] with Δ = neighbor − target; empty set -> [0,0,0,0,1].
std::vector<double> location_diff(const BoundingBox& target, const std::vector<BoundingBox>& neighbors);

// g_i: mean feature of the scene's NMS survivors (shared by all targets).
std::vector<double> global_context(const Scene& scene, double iou_threshold = 0.7);

struct ContextBundle {
  std::vector<double> o, g, l, d_o, d_l;
  std::vector<int> neighbor_ids;
  Tensor v;  // d_s projection of [o, g, l, δo, δl] through W_m
};

// Raw concatenation [o, g, l, δo, δl]; length 3·d_v + 10.
std::vector<double> context_concat(const ContextBundle& b);

// Assembles the five context parts for one object and projects them with
// the learned map w_m ((3·d_v+10) × d_s). With zero_local_context the δo/δl
// slots are zeroed (context ablation); everything else is unchanged.
ContextBundle context_bundle(const Scene& scene, int target_id, const Tensor& w_m, int k = 20,
                             double iou_threshold = 0.7, bool zero_local_context = false);

}  // namespace jemha
