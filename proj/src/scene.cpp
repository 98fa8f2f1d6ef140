#include "jemha/scene.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "jemha/ops.hpp"

namespace jemha {

double iou(const BoundingBox& a, const BoundingBox& b) {
  const double ix = std::max(0.0, std::min(a.x_br, b.x_br) - std::max(a.x_tl, b.x_tl));
  const double iy = std::max(0.0, std::min(a.y_br, b.y_br) - std::max(a.y_tl, b.y_tl));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni <= 0.0 ? 0.0 : inter / uni;
}

const DetectedObject& Scene::object_by_id(int id) const {
  for (const auto& o : objects) {
    if (o.id == id) return o;
  }
  throw std::invalid_argument("scene: unknown object id " + std::to_string(id));
}

bool Scene::has_object(int id) const {
  for (const auto& o : objects) {
    if (o.id == id) return true;
  }
  return false;
}

void validate_scene(const Scene& scene) {
  if (scene.objects.empty()) throw std::invalid_argument("scene: no objects");
  if (!(scene.width > 0.0) || !(scene.height > 0.0)) throw std::invalid_argument("scene: non-positive image size");
  const std::size_t d_v = scene.objects.front().feature.size();
  std::vector<int> ids;
  for (const auto& o : scene.objects) {
    if (o.feature.size() != d_v) {
      throw std::invalid_argument("scene: object " + std::to_string(o.id) + " feature dim " +
                                  std::to_string(o.feature.size()) + " != " + std::to_string(d_v));
    }
    if (!std::isfinite(o.score)) throw std::invalid_argument("scene: object " + std::to_string(o.id) + " score not finite");
    location_size(o.box, scene.width, scene.height);  // box validity
    ids.push_back(o.id);
  }
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) {
    throw std::invalid_argument("scene: duplicate object ids");
  }
}

std::vector<double> location_size(const BoundingBox& box, double width, double height) {
  if (!(box.x_br > box.x_tl) || !(box.y_br > box.y_tl)) {
    throw std::invalid_argument("location_size: degenerate box");
  }
  if (box.x_tl < 0.0 || box.y_tl < 0.0 || box.x_br > width || box.y_br > height) {
    throw std::invalid_argument("location_size: box outside image");
  }
  return {box.x_tl / width, box.y_tl / height, box.x_br / width, box.y_br / height,
          box.area() / (width * height)};
}

std::vector<int> nms(const std::vector<DetectedObject>& objects, double iou_threshold) {
  std::vector<const DetectedObject*> order;
  order.reserve(objects.size());
  for (const auto& o : objects) order.push_back(&o);
  std::sort(order.begin(), order.end(), [](const DetectedObject* a, const DetectedObject* b) {
    if (a->score != b->score) return a->score > b->score;
    return a->id < b->id;
  });
  std::vector<int> kept;
  std::vector<bool> dropped(order.size(), false);
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (dropped[i]) continue;
    kept.push_back(order[i]->id);
    for (std::size_t j = i + 1; j < order.size(); ++j) {
      if (!dropped[j] && iou(order[i]->box, order[j]->box) > iou_threshold) dropped[j] = true;
    }
  }
  return kept;
}

std::vector<int> knn_neighbors(const Scene& scene, int target_id, int k, double iou_threshold) {
  const auto survivors = nms(scene.objects, iou_threshold);
  if (std::find(survivors.begin(), survivors.end(), target_id) == survivors.end()) {
    throw std::invalid_argument("knn_neighbors: target " + std::to_string(target_id) + " does not survive NMS");
  }
  const auto& target = scene.object_by_id(target_id);
  std::vector<std::pair<double, int>> by_dist;
  for (int id : survivors) {
    if (id == target_id) continue;
    const auto& o = scene.object_by_id(id);
    const double dx = o.box.cx() - target.box.cx();
    const double dy = o.box.cy() - target.box.cy();
    by_dist.emplace_back(std::sqrt(dx * dx + dy * dy), id);
  }
  std::sort(by_dist.begin(), by_dist.end());
  std::vector<int> out;
  for (const auto& [dist, id] : by_dist) {
    if (static_cast<int>(out.size()) == k) break;
    out.push_back(id);
  }
  return out;
}

std::vector<double> visual_diff(const std::vector<double>& target_feat,
                                const std::vector<std::vector<double>>& neighbor_feats) {
  std::vector<double> acc(target_feat.size(), 0.0);
  if (neighbor_feats.empty()) return acc;
  for (const auto& nf : neighbor_feats) {
    if (nf.size() != target_feat.size()) throw std::invalid_argument("visual_diff: feature dim mismatch");
    double norm = 0.0;
    for (std::size_t i = 0; i < nf.size(); ++i) {
      const double d = target_feat[i] - nf[i];
      norm += d * d;
    }
    norm = std::sqrt(norm);
    if (norm < 1e-8) continue;  // identical features pull in no direction
    for (std::size_t i = 0; i < nf.size(); ++i) acc[i] += (target_feat[i] - nf[i]) / norm;
  }
  const double inv = 1.0 / static_cast<double>(neighbor_feats.size());
  for (auto& v : acc) v *= inv;
  return acc;
}

std::vector<double> location_diff(const BoundingBox& target, const std::vector<BoundingBox>& neighbors) {
  if (neighbors.empty()) return {0.0, 0.0, 0.0, 0.0, 1.0};
  const double w = target.width(), h = target.height(), area = target.area();
  std::vector<double> acc(5, 0.0);
  for (const auto& nb : neighbors) {
    acc[0] += (nb.x_tl - target.x_tl) / w;
    acc[1] += (nb.y_tl - target.y_tl) / h;
    acc[2] += (nb.x_br - target.x_br) / w;
    acc[3] += (nb.y_br - target.y_br) / h;
    acc[4] += nb.area() / area;
  }
  const double inv = 1.0 / static_cast<double>(neighbors.size());
  for (auto& v : acc) v *= inv;
  return acc;
}

std::vector<double> global_context(const Scene& scene, double iou_threshold) {
  const auto survivors = nms(scene.objects, iou_threshold);
  std::vector<double> g(scene.objects.front().feature.size(), 0.0);
  for (int id : survivors) {
    const auto& f = scene.object_by_id(id).feature;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += f[i];
  }
  const double inv = 1.0 / static_cast<double>(survivors.size());
  for (auto& v : g) v *= inv;
  return g;
}

std::vector<double> context_concat(const ContextBundle& b) {
  std::vector<double> x;
  x.reserve(b.o.size() + b.g.size() + b.l.size() + b.d_o.size() + b.d_l.size());
  for (const auto* part : {&b.o, &b.g, &b.l, &b.d_o, &b.d_l}) x.insert(x.end(), part->begin(), part->end());
  return x;
}

ContextBundle context_bundle(const Scene& scene, int target_id, const Tensor& w_m, int k, double iou_threshold,
                             bool zero_local_context) {
  const auto& target = scene.object_by_id(target_id);
  ContextBundle b;
  b.o = target.feature;
  b.g = global_context(scene, iou_threshold);
  b.l = location_size(target.box, scene.width, scene.height);
  b.neighbor_ids = knn_neighbors(scene, target_id, k, iou_threshold);

  std::vector<std::vector<double>> feats;
  std::vector<BoundingBox> boxes;
  for (int id : b.neighbor_ids) {
    const auto& nb = scene.object_by_id(id);
    feats.push_back(nb.feature);
    boxes.push_back(nb.box);
  }
  b.d_o = visual_diff(b.o, feats);
  b.d_l = location_diff(target.box, boxes);
  if (zero_local_context) {
    std::fill(b.d_o.begin(), b.d_o.end(), 0.0);
    std::fill(b.d_l.begin(), b.d_l.end(), 0.0);
  }

  auto x = context_concat(b);
  const int n = static_cast<int>(x.size());
  if (w_m.ndim() != 2 || w_m.rows() != n) {
    throw std::invalid_argument("context_bundle: w_m shape " + shape_str(w_m.shape()) + " vs concat length " +
                                std::to_string(n));
  }
  b.v = reshape(matmul(reshape(Tensor({n}, std::move(x)), {1, n}), w_m), {w_m.cols()});
  return b;
}

}  // namespace jemha
