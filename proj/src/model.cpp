#include "aop/model.hpp"

#include "aop/losses.hpp"

namespace aop {

namespace {

ScBackboneConfig sc_config(const RunConfig& cfg, int in_channels) {
  ScBackboneConfig sc;
  sc.in_channels = in_channels;
  sc.width1 = cfg.sc_width1;
  sc.width2 = cfg.sc_width2;
  sc.n0 = cfg.sc_n0;
  sc.n1 = cfg.sc_n1;
  sc.n2 = cfg.sc_n2;
  sc.ratio = cfg.sc_ratio;
  sc.use_sc = cfg.use_sc;
  return sc;
}

IfrConfig ifr_config(const RunConfig& cfg) {
  IfrConfig c;
  c.feature_channels = cfg.c1;
  c.code_width = cfg.code_width;
  c.vfe_ratio = cfg.vfe_ratio;
  c.mlp_ratio = cfg.mlp_ratio;
  c.k_s1 = cfg.k_s1;
  c.k_s2 = cfg.k_s2;
  return c;
}

}  // namespace

std::array<InstanceMask, 3> rasterize_masks(const PointCloud& pc, const std::vector<std::uint32_t>& ids,
                                            const GridSpec& grid) {
  std::array<InstanceMask, 3> out;
  for (int s = 0; s < 3; ++s) out[s] = rasterize_instances(pc, ids, grid, kMaskFactors[s]);
  return out;
}

SceneInput prepare_scene(const PointCloud& points, const RunConfig& cfg, const std::vector<PointLabel>* labels,
                         const std::vector<Box3D>* boxes) {
  SceneInput s;
  s.points = points;
  s.raw = voxelize_raw(points, cfg.grid);
  s.rv = project_rv(points, cfg.rv);
  s.fusion = build_fusion_index(s.rv, points, s.raw);
  if (labels) {
    if (labels->size() != points.size()) throw ContractError("prepare_scene: label count differs from point count");
    s.has_labels = true;
    s.labels = *labels;
    ClassSet classes;
    s.panoptic_targets = make_panoptic_targets(s.rv, points, *labels, classes);
    std::vector<std::uint32_t> ids(labels->size());
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = classes.thing((*labels)[i].semantic) ? (*labels)[i].instance : 0;
    s.gt_masks = rasterize_masks(points, ids, cfg.grid);
  }
  if (boxes) s.boxes = *boxes;
  s.detection_targets = make_targets(s.boxes, cfg.grid, kDetectFactor, ClassSet{}.num_things());
  return s;
}

template <typename T>
Pipeline<T>::Pipeline(ParamStore<T>& ps, const RunConfig& cfg) : cfg_(cfg) {
  validate_config(cfg);
  embed_ = Linear<T>(ps, "embed", kRawVoxelFeatures, cfg.c0);
  backbone_ = Backbone3d<T>(ps, "backbone3d", cfg.c0, cfg.c1, cfg.c2);
  PanopticHeadConfig pc;
  pc.widths = cfg.pan_widths;
  pc.num_classes = classes_.num_classes;
  pc.voxel_channels = {cfg.c1, cfg.c1, cfg.c2};
  pc.dual_task = cfg.dual_task;
  panoptic_ = PanopticHead<T>(ps, "panoptic", pc);
  const int bev_in = cfg.c2 * (cfg.grid.Z / kStrideS3[0]);
  const auto sc = sc_config(cfg, bev_in);
  sc_ = ScBackbone<T>(ps, "sc2d", sc);
  const int nfg = classes_.num_things();
  fusion_ = FusionAttention<T>(ps, "fusion", sc.out_channels(), nfg);
  det_in_ = sc.out_channels() + nfg;
  if (cfg.use_ifr) {
    ifr_.emplace(ps, "ifr", ifr_config(cfg));
    det_in_ += ifr_->config().out_channels();
  }
  head_ = DetectHead<T>(ps, "detect", det_in_, cfg.det_trunk, nfg);
}

template <typename T>
PipelineOutput<T> Pipeline<T>::forward(const SceneInput& scene, MaskSource source, bool training) {
  PipelineOutput<T> out;
  auto volume = embed_voxels(scene.raw, embed_);
  auto pyramid = backbone_(volume, training);
  const auto rv_feat = scene.rv.features.template cast<T>();
  out.panoptic = panoptic_(rv_feat, cfg_.dual_task ? &pyramid : nullptr, &scene.fusion, training);

  const auto logits = out.panoptic.logits.template cast<float>();
  out.fg_scores = foreground_scores(logits, scene.rv, scene.points, cfg_.grid, classes_, kDetectFactor);
  auto bev = sc_(bev_collapse(pyramid.s3), training);
  auto features = fusion_(bev, out.fg_scores.template cast<T>());

  if (source == MaskSource::Predicted) {
    PanopticOutput<float> pf{logits, out.panoptic.offsets.template cast<float>()};
    out.predicted = postprocess_panoptic(pf, scene, cfg_);
    out.masks = rasterize_masks(scene.points, out.predicted.instance, cfg_.grid);
  } else {
    if (!scene.has_labels) throw ContractError("ground-truth masks requested for an unlabelled scene");
    out.masks = scene.gt_masks;
  }
  if (ifr_) {
    const auto avg1 = average_over_height(pyramid.s1);
    const auto avg2 = average_over_height(pyramid.s2);
    out.ifr = (*ifr_)(avg1, avg2, out.masks[0], out.masks[1], out.masks[2], training);
    features = ops::concat<T>({features, out.ifr->map}, 0);
  }
  out.detection = head_(features, training);
  return out;
}

template <typename T>
Tensor<T> joint_loss(const PipelineOutput<T>& out, const SceneInput& scene, const RunConfig& cfg,
                     LossBreakdown* parts) {
  auto det = detection_loss(out.detection, scene.detection_targets, cfg.w_heatmap, cfg.w_regression);
  auto pan = panoptic_loss(out.panoptic, scene.panoptic_targets, cfg.w_ce, cfg.w_offset);
  auto total = ops::add(ops::scale(det, static_cast<T>(cfg.w_det)), ops::scale(pan, static_cast<T>(cfg.w_pan)));
  if (parts) {
    parts->detection = static_cast<double>(det.item());
    parts->panoptic = static_cast<double>(pan.item());
    parts->total = static_cast<double>(total.item());
  }
  return total;
}

PanopticLabels postprocess_panoptic(const PanopticOutput<float>& out, const SceneInput& scene, const RunConfig& cfg) {
  ClassSet classes;
  PanopticLabels p;
  p.semantic = point_semantics(out.logits, scene.rv, scene.points.size());
  p.instance = cluster_instances(out.offsets, p.semantic, scene.points, scene.rv, classes, cfg.cluster);
  harmonize_instance_classes(p.semantic, p.instance, classes);
  return p;
}

Prediction predict(Pipeline<float>& model, const SceneInput& scene, const RunConfig& cfg) {
  NoGradScope no_grad;
  Prediction p;
  p.raw = model.forward(scene, MaskSource::Predicted, false);
  p.panoptic = p.raw.predicted;
  p.boxes = decode_boxes(p.raw.detection.heatmap, p.raw.detection.regression, cfg.grid, kDetectFactor,
                         cfg.score_thresh, cfg.max_dets);
  return p;
}

template class Pipeline<float>;
template class Pipeline<double>;
template Tensor<float> joint_loss(const PipelineOutput<float>&, const SceneInput&, const RunConfig&, LossBreakdown*);
template Tensor<double> joint_loss(const PipelineOutput<double>&, const SceneInput&, const RunConfig&, LossBreakdown*);

}  // namespace aop
