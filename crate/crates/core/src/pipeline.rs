//! End-to-end orchestration: keyframe gating, local/loop/global bundle
//! adjustment, proxy-depth fusion, map deformation and mapping, followed by
//! final refinement and evaluation.
//!
//! Tracking and mapping run sequentially per keyframe. Every mapping phase is
//! preceded by a deformation pass over all keyframes whose pose or proxy
//! depth changed since their Gaussians were last placed.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::RunConfig;
use crate::eval::{self, Alignment, Trajectory};
use crate::frontend::FrameSource;
use crate::gaussians::{GaussianMap, KeyframeId, KeyframeUpdate, MapError};
use crate::geometry::Intrinsics;
use crate::grid::{DepthMap, Grid};
use crate::mapping::{
    final_refine, optimize_map, KeyframeWindow, MapFrame, MapOptimizer, MappingError,
};
use crate::proxy::{fuse_proxy_depth, FusionInput, ProxyDepth, ProxyError, ProxySource};
use crate::render::{render, RenderOutput, RenderParams};
use crate::tracking::{
    classify_disparities, dba_step, detect_loops, dspo_step, fit_scale_shift, keyframe_gate,
    normalize_scale, BaContext, EdgeKind, FactorGraph, FlowEdge, Keyframe, TrackError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("frame {frame}, stage {stage}: {source}")]
    Track {
        frame: usize,
        stage: &'static str,
        source: TrackError,
    },
    #[error("frame {frame}, stage {stage}: {source}")]
    Proxy {
        frame: usize,
        stage: &'static str,
        source: ProxyError,
    },
    #[error("frame {frame}, stage {stage}: {source}")]
    Map {
        frame: usize,
        stage: &'static str,
        source: MapError,
    },
    #[error("{0}")]
    Mapping(#[from] MappingError),
}

/// Instrumentation counters; the pipeline-order invariants are asserted on
/// these by the test suites.
#[derive(Clone, Copy, Debug, Default)]
pub struct Counters {
    pub keyframes: usize,
    pub mapped_keyframes: usize,
    pub mapping_phases: usize,
    pub deform_phases: usize,
    pub deformed_gaussians: usize,
    pub loop_edges: usize,
    pub global_ba_runs: usize,
    /// Mapping phases that started while a keyframe with anchored Gaussians
    /// still had unapplied pose/depth updates. Zero by construction.
    pub mapping_with_stale_map: usize,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub counters: Counters,
    pub gaussian_count: usize,
    /// Sim3-aligned keyframe ATE RMSE in cm, when ground truth is available.
    pub ate_rmse_cm: Option<f64>,
    pub psnr_db: f64,
    pub ssim: f64,
    /// Depth L1 in cm against ground-truth depth, scale-aligned through the
    /// trajectory Sim3 (monocular scale is unobservable).
    pub depth_l1_cm: Option<f64>,
    /// Scale applied to rendered depths for the depth metric.
    pub depth_scale: f64,
    pub mean_scene_depth_m: Option<f64>,
    /// Diameter of the ground-truth trajectory, meters.
    pub trajectory_span_m: Option<f64>,
}

/// Full pipeline output: report plus the state artifacts the exporters need.
pub struct RunOutput {
    pub report: RunReport,
    pub map: GaussianMap,
    pub graph: FactorGraph,
    pub proxies: BTreeMap<KeyframeId, ProxyDepth>,
    pub intrinsics: Intrinsics,
    pub estimated: Trajectory,
    /// Final per-keyframe renders, aligned with the keyframe order.
    pub renders: Vec<(KeyframeId, RenderOutput)>,
}

struct Pipeline<'a, S: FrameSource> {
    source: &'a S,
    config: &'a RunConfig,
    intrinsics: Intrinsics,
    params: RenderParams,
    graph: FactorGraph,
    map: GaussianMap,
    window: KeyframeWindow,
    optimizer: MapOptimizer,
    proxies: BTreeMap<KeyframeId, ProxyDepth>,
    fit_cache: BTreeMap<KeyframeId, Option<(f64, f64)>>,
    /// Pose and proxy under which each keyframe's Gaussians currently sit.
    anchored_state: BTreeMap<KeyframeId, (crate::geometry::Pose, ProxyDepth)>,
    /// Keyframes whose pose/disparity moved since their proxy was fused.
    dirty: BTreeSet<KeyframeId>,
    fit_done: BTreeSet<KeyframeId>,
    global_iter: u64,
    counters: Counters,
    rng: ChaCha8Rng,
}

pub fn run_pipeline<S: FrameSource>(
    source: &S,
    config: &RunConfig,
) -> Result<RunOutput, PipelineError> {
    if source.is_empty() {
        return Err(PipelineError::InvalidInput("empty frame stream".into()));
    }
    let p = Pipeline {
        source,
        config,
        intrinsics: source.intrinsics(),
        params: RenderParams::default(),
        graph: FactorGraph::new(),
        map: GaussianMap::new(),
        window: KeyframeWindow::new(config.mapping.window_size),
        optimizer: MapOptimizer::new(),
        proxies: BTreeMap::new(),
        fit_cache: BTreeMap::new(),
        anchored_state: BTreeMap::new(),
        dirty: BTreeSet::new(),
        fit_done: BTreeSet::new(),
        global_iter: 0,
        counters: Counters::default(),
        rng: ChaCha8Rng::seed_from_u64(config.seed),
    };
    p.run()
}

impl<S: FrameSource> Pipeline<'_, S> {
    fn run(mut self) -> Result<RunOutput, PipelineError> {
        for frame in 0..self.source.len() {
            let admit = match self.graph.keyframes.last() {
                None => true,
                Some(last) => keyframe_gate(
                    self.source.mean_flow(last.frame_index, frame),
                    self.config.tracking.tau,
                ),
            };
            if admit {
                self.process_keyframe(frame)?;
            }
        }
        self.finalize()
    }

    fn active_window(&self) -> BTreeSet<usize> {
        let n = self.graph.keyframes.len();
        let w = self.config.tracking.local_window.min(n);
        (n - w..n).collect()
    }

    /// Gauge for an optimization over `active`: when an included edge touches
    /// a frozen pose the gauge is anchored by it; otherwise pin the first
    /// active frame.
    fn ba_context(&self, active: BTreeSet<usize>) -> BaContext {
        let crosses = self.graph.edges.iter().any(|e| {
            active.contains(&e.from.0) != active.contains(&e.to.0)
        });
        let gauge_fixed = if crosses {
            BTreeSet::new()
        } else {
            active.iter().next().copied().into_iter().collect()
        };
        BaContext {
            active,
            gauge_fixed,
        }
    }

    fn process_keyframe(&mut self, frame: usize) -> Result<(), PipelineError> {
        let data = self.source.frame(frame);
        let id = KeyframeId(self.graph.keyframes.len());
        let (pose, disparity) = match self.graph.keyframes.last() {
            None => {
                // Bootstrap: the mono depth (whatever its scale) seeds the
                // first disparity map and thereby the global scale.
                let disp = data.mono_depth.map(|&m| if m > 0.0 { 1.0 / m } else { 0.0 });
                (crate::geometry::Pose::identity(), disp)
            }
            Some(last) => {
                // Mono-shaped init through the last keyframe's disparity-space
                // fit keeps the new frame in the graph's scale family and away
                // from the planar two-view ambiguity.
                let (theta, gamma) = (last.scale, last.shift);
                let fallback = last
                    .disparity
                    .masked_mean(|_, _, d| d > 0.0)
                    .unwrap_or(1.0);
                let disp = data.mono_depth.map(|&m| {
                    if m > 0.0 {
                        let d = theta / m + gamma;
                        if d > 1e-6 {
                            d
                        } else {
                            fallback
                        }
                    } else {
                        fallback
                    }
                });
                (last.pose, disp)
            }
        };
        self.graph.add_keyframe(Keyframe::new(
            id,
            frame,
            pose,
            disparity,
            data.mono_depth,
            data.image,
        ));
        self.counters.keyframes += 1;

        // Bidirectional odometry edges to the two most recent keyframes.
        for back in 1..=2usize {
            let Some(prev) = id.0.checked_sub(back) else {
                break;
            };
            let prev_frame = self.graph.keyframes[prev].frame_index;
            let fwd = self.source.flow(prev_frame, frame);
            self.graph.add_edge(FlowEdge {
                from: KeyframeId(prev),
                to: id,
                target: fwd.target,
                weight: fwd.confidence,
                kind: EdgeKind::Odometry,
            });
            let bwd = self.source.flow(frame, prev_frame);
            self.graph.add_edge(FlowEdge {
                from: id,
                to: KeyframeId(prev),
                target: bwd.target,
                weight: bwd.confidence,
                kind: EdgeKind::Odometry,
            });
        }

        if self.graph.keyframes.len() >= 2 {
            let active = self.active_window();
            self.local_ba(frame, active.clone())?;
            self.mark_dirty(&active);

            if !self.config.ablations.no_loop_closure {
                self.loop_closure(frame, &active)?;
                if self.counters.keyframes % self.config.tracking.global_ba_every == 0 {
                    self.global_ba(frame)?;
                }
            }
        }

        self.mapping_phase(frame, id)
    }

    fn mark_dirty(&mut self, touched: &BTreeSet<usize>) {
        for &i in touched {
            self.dirty.insert(KeyframeId(i));
        }
    }

    fn local_ba(&mut self, frame: usize, active: BTreeSet<usize>) -> Result<(), PipelineError> {
        let ctx = self.ba_context(active.clone());
        let wrap = |e: TrackError| PipelineError::Track {
            frame,
            stage: "local BA",
            source: e,
        };
        let rounds = self.config.tracking.ba_rounds;
        let mut classified = false;
        for round in 0..rounds {
            dba_step(&mut self.graph, &self.intrinsics, &ctx).map_err(wrap)?;
            dba_step(&mut self.graph, &self.intrinsics, &ctx).map_err(wrap)?;
            // Two warm-up rounds settle the fresh keyframe before the first
            // consistency classification.
            if round < 2 {
                continue;
            }
            if !classified {
                self.classify_frames(&active);
                if !self.config.ablations.no_mono_depth {
                    self.init_scale_shift(&active);
                }
                classified = true;
            }
            if self.config.ablations.no_mono_depth || !self.fits_ready(&active) {
                continue;
            }
            dspo_step(
                &mut self.graph,
                &self.intrinsics,
                &ctx,
                self.config.tracking.alpha1,
                self.config.tracking.alpha2,
            )
            .map_err(|e| PipelineError::Track {
                frame,
                stage: "DSPO",
                source: e,
            })?;
        }
        // The proxy validity masks rely on the consistency counts; make sure
        // they exist even for short round budgets.
        if !classified {
            self.classify_frames(&active);
            if !self.config.ablations.no_mono_depth {
                self.init_scale_shift(&active);
            }
        }
        Ok(())
    }

    fn fits_ready(&self, frames: &BTreeSet<usize>) -> bool {
        frames
            .iter()
            .all(|i| self.fit_done.contains(&self.graph.keyframes[*i].id))
    }

    fn classify_frames(&mut self, frames: &BTreeSet<usize>) {
        for &i in frames {
            let (counts, mask) = classify_disparities(
                &self.graph.keyframes,
                i,
                &self.intrinsics,
                self.config.tracking.eta,
                self.config.tracking.n_consistency,
            );
            let kf = &mut self.graph.keyframes[i];
            kf.consistency = counts;
            kf.low_error = mask;
        }
    }

    fn init_scale_shift(&mut self, frames: &BTreeSet<usize>) {
        for &i in frames {
            let id = self.graph.keyframes[i].id;
            if self.fit_done.contains(&id) {
                continue;
            }
            if let Ok((theta, gamma)) = fit_scale_shift(&self.graph.keyframes[i]) {
                let kf = &mut self.graph.keyframes[i];
                kf.scale = theta;
                kf.shift = gamma;
                self.fit_done.insert(id);
            }
        }
    }

    fn loop_closure(
        &mut self,
        frame: usize,
        active: &BTreeSet<usize>,
    ) -> Result<(), PipelineError> {
        let pairs = detect_loops(
            &self.graph,
            active,
            |fi, fj| self.source.mean_flow(fi, fj),
            self.config.tracking.tau_loop,
            self.config.tracking.tau_t,
        );
        if pairs.is_empty() {
            return Ok(());
        }
        let mut touched = active.clone();
        for (from, to) in pairs {
            let flow = self
                .source
                .flow(self.graph.keyframes[from.0].frame_index, self.graph.keyframes[to.0].frame_index);
            if self.graph.add_edge(FlowEdge {
                from,
                to,
                target: flow.target,
                weight: flow.confidence,
                kind: EdgeKind::Loop,
            }) {
                self.counters.loop_edges += 1;
                touched.insert(from.0);
                touched.insert(to.0);
            }
        }
        // Loop BA: the active window plus the connected loop nodes.
        let ctx = self.ba_context(touched.clone());
        let wrap = |e: TrackError| PipelineError::Track {
            frame,
            stage: "loop BA",
            source: e,
        };
        for _ in 0..self.config.tracking.ba_rounds {
            dba_step(&mut self.graph, &self.intrinsics, &ctx).map_err(wrap)?;
            dba_step(&mut self.graph, &self.intrinsics, &ctx).map_err(wrap)?;
        }
        self.mark_dirty(&touched);
        Ok(())
    }

    fn global_ba(&mut self, frame: usize) -> Result<(), PipelineError> {
        let wrap = |e: TrackError| PipelineError::Track {
            frame,
            stage: "global BA",
            source: e,
        };
        run_global_ba(
            &mut self.graph,
            self.source,
            &self.intrinsics,
            self.config,
            &mut self.fit_done,
        )
        .map_err(wrap)?;
        self.counters.global_ba_runs += 1;
        let all: BTreeSet<usize> = (0..self.graph.keyframes.len()).collect();
        self.mark_dirty(&all);
        Ok(())
    }

    /// Fuse the proxy depth of one keyframe from its current disparity,
    /// consistency mask and mono depth.
    fn refresh_proxy(&mut self, id: KeyframeId, frame: usize) -> Result<(), PipelineError> {
        let kf = &self.graph.keyframes[id.0];
        let (w, h) = (kf.disparity.width(), kf.disparity.height());
        let multiview_depth: DepthMap = kf.disparity.map(|&d| if d > 0.0 { 1.0 / d } else { 0.0 });
        // Early in the stream there are not enough other keyframes for the
        // full consistency count; clamp the threshold to the available
        // evidence (with a single keyframe everything passes).
        let effective_threshold = self
            .config
            .tracking
            .n_consistency
            .min(self.graph.keyframes.len().saturating_sub(1) as u32);
        let valid: Grid<bool> = Grid::from_fn(w, h, |x, y| {
            let d = *kf.disparity.get(x, y);
            d > 0.0
                && (self.config.ablations.no_multiview_filter
                    || *kf.consistency.get(x, y) >= effective_threshold)
        });

        let proxy = if self.config.ablations.no_mono_depth {
            let mut depth = Grid::filled(w, h, 0.0);
            let mut source = Grid::filled(w, h, ProxySource::Invalid);
            for (x, y, &dv) in multiview_depth.pixels() {
                if *valid.get(x, y) && dv > 0.0 {
                    *depth.get_mut(x, y) = dv;
                    *source.get_mut(x, y) = ProxySource::Multiview;
                }
            }
            ProxyDepth { depth, source }
        } else {
            let cache = self.fit_cache.entry(id).or_insert(None);
            fuse_proxy_depth(
                &FusionInput {
                    multiview_depth: &multiview_depth,
                    multiview_valid: &valid,
                    mono_depth: &kf.mono_depth,
                },
                cache,
            )
            .map_err(|e| PipelineError::Proxy {
                frame,
                stage: "proxy fusion",
                source: e,
            })?
        };
        self.proxies.insert(id, proxy);
        Ok(())
    }

    /// Deform anchored Gaussians of every dirty keyframe to its new pose and
    /// freshly fused proxy depth, then clear the dirty set.
    fn deform_dirty(&mut self, frame: usize) -> Result<(), PipelineError> {
        if self.dirty.is_empty() {
            return Ok(());
        }
        let dirty: Vec<KeyframeId> = self.dirty.iter().copied().collect();
        // Re-fuse proxies for everything that moved.
        for &id in &dirty {
            self.refresh_proxy(id, frame)?;
        }
        let mut updates = Vec::new();
        for &id in &dirty {
            let Some((old_pose, old_proxy)) = self.anchored_state.get(&id) else {
                continue; // nothing anchored to this keyframe yet
            };
            let new_pose = self.graph.keyframes[id.0].pose;
            let new_proxy = self.proxies[&id].clone();
            updates.push(KeyframeUpdate {
                kf: id,
                old_pose: *old_pose,
                new_pose,
                old_proxy: old_proxy.clone(),
                new_proxy,
            });
        }
        if !updates.is_empty() {
            self.counters.deform_phases += 1;
            if !self.config.ablations.no_deform {
                self.counters.deformed_gaussians += self.map.deform(&updates, &self.intrinsics);
            }
            for u in updates {
                self.anchored_state.insert(u.kf, (u.new_pose, u.new_proxy));
            }
        }
        self.dirty.clear();
        Ok(())
    }

    fn mapping_phase(&mut self, frame: usize, id: KeyframeId) -> Result<(), PipelineError> {
        // Map deformation must land before mapping sees the new state.
        self.deform_dirty(frame)?;
        if !self.dirty.is_empty() {
            self.counters.mapping_with_stale_map += 1;
        }
        if !self.proxies.contains_key(&id) {
            self.refresh_proxy(id, frame)?;
        }

        let median_depth = self.proxies[&id]
            .depth
            .positive_median()
            .unwrap_or(1.0);
        let graph = &self.graph;
        let pose_of = |kf: KeyframeId| graph.keyframes[kf.0].pose;
        let mapping_config = self.config.mapping_config();
        let (admitted, _evicted) = self.window.update(
            id,
            median_depth,
            &pose_of,
            &self.map,
            &self.intrinsics,
            &mapping_config,
            &self.params,
        );
        if !admitted {
            return Ok(());
        }

        let theta = if self.counters.mapped_keyframes == 0 {
            self.config.map_init.theta_first
        } else {
            self.config.map_init.theta
        };
        let kf = &self.graph.keyframes[id.0];
        self.map
            .anchor_gaussians(
                id,
                &kf.pose,
                &self.intrinsics,
                &kf.image,
                &self.proxies[&id],
                theta,
            )
            .map_err(|e| PipelineError::Map {
                frame,
                stage: "anchoring",
                source: e,
            })?;
        self.anchored_state
            .insert(id, (kf.pose, self.proxies[&id].clone()));
        self.counters.mapped_keyframes += 1;

        self.optimize_window(frame, self.config.mapping.map_iters, true)?;
        self.counters.mapping_phases += 1;
        Ok(())
    }

    fn optimize_window(
        &mut self,
        _frame: usize,
        iterations: usize,
        densify: bool,
    ) -> Result<(), PipelineError> {
        let mapping_config = self.config.mapping_config();
        let densify_config = self.config.densify_config();
        let window_full = self.window.is_full();
        let Pipeline {
            graph,
            proxies,
            window,
            map,
            optimizer,
            global_iter,
            rng,
            intrinsics,
            params,
            ..
        } = self;
        let frames: Vec<MapFrame> = window
            .entries()
            .iter()
            .map(|&kf| {
                let k = &graph.keyframes[kf.0];
                let proxy = proxies
                    .get(&kf)
                    .ok_or(PipelineError::Mapping(MappingError::MissingProxyDepth(kf)))?;
                Ok(MapFrame {
                    kf,
                    pose: k.pose,
                    image: &k.image,
                    proxy,
                    exposure: k.exposure,
                })
            })
            .collect::<Result<_, PipelineError>>()?;
        let result = optimize_map(
            map,
            &frames,
            optimizer,
            &mapping_config,
            &densify_config,
            intrinsics,
            params,
            iterations,
            global_iter,
            window_full,
            densify,
            rng,
        );
        drop(frames);
        for (kf, exposure) in result.exposures {
            self.graph.keyframe_mut(kf).exposure = exposure;
        }
        Ok(())
    }

    fn finalize(mut self) -> Result<RunOutput, PipelineError> {
        let last_frame = self.source.len() - 1;
        if self.graph.keyframes.len() >= 2 && !self.config.ablations.no_loop_closure {
            self.global_ba(last_frame)?;
        }
        self.deform_dirty(last_frame)?;

        // Final refinement over all keyframes with a proxy.
        let mapping_config = self.config.mapping_config();
        let all_ids: Vec<KeyframeId> = self.graph.keyframes.iter().map(|k| k.id).collect();
        for id in &all_ids {
            if !self.proxies.contains_key(id) {
                self.refresh_proxy(*id, last_frame)?;
            }
        }
        let count_before = self.map.len();
        let Pipeline {
            graph,
            proxies,
            map,
            optimizer,
            rng,
            intrinsics,
            params,
            ..
        } = &mut self;
        let frames: Vec<MapFrame> = graph
            .keyframes
            .iter()
            .map(|k| MapFrame {
                kf: k.id,
                pose: k.pose,
                image: &k.image,
                proxy: &proxies[&k.id],
                exposure: k.exposure,
            })
            .collect();
        let (_trace, exposures) = final_refine(
            map,
            &frames,
            optimizer,
            &mapping_config,
            intrinsics,
            params,
            mapping_config.beta,
            rng,
        );
        drop(frames);
        debug_assert_eq!(count_before, self.map.len());
        for (kf, exposure) in exposures {
            self.graph.keyframe_mut(kf).exposure = exposure;
        }

        self.evaluate()
    }

    fn evaluate(self) -> Result<RunOutput, PipelineError> {
        let mut estimated = Trajectory::new();
        let mut gt = Trajectory::new();
        let mut have_gt = true;
        for kf in &self.graph.keyframes {
            estimated.push(kf.frame_index, kf.pose);
            match self.source.gt_pose(kf.frame_index) {
                Some(p) => gt.push(kf.frame_index, p),
                None => have_gt = false,
            }
        }

        let (ate, depth_scale, span) = if have_gt && estimated.len() >= 3 {
            let ate = eval::ate_rmse(&estimated, &gt, Alignment::Sim3).ok();
            let scale = eval::align_sim3(&estimated.positions(), &gt.positions())
                .map(|s| s.scale)
                .unwrap_or(1.0);
            let pos = gt.positions();
            let mut span = 0.0f64;
            for i in 0..pos.len() {
                for j in i + 1..pos.len() {
                    span = span.max((pos[i] - pos[j]).norm());
                }
            }
            (ate, scale, Some(span))
        } else {
            (None, 1.0, None)
        };

        let mut renders = Vec::new();
        let mut psnr_sum = 0.0;
        let mut ssim_sum = 0.0;
        let mut depth_err_sum = 0.0;
        let mut depth_err_n = 0usize;
        let mut scene_depth_sum = 0.0;
        let mut scene_depth_n = 0usize;
        for kf in &self.graph.keyframes {
            let out = render(
                &self.map,
                &kf.pose,
                &self.intrinsics,
                kf.exposure,
                &self.params,
            );
            psnr_sum += eval::psnr(&out.color, &kf.image).expect("same size");
            ssim_sum += eval::ssim(&out.color, &kf.image).expect("same size");
            if let Some(gt_depth) = self.source.gt_depth(kf.frame_index) {
                let scaled = out.depth.map(|&d| d * depth_scale);
                if let Some(l1) = eval::depth_l1_cm(
                    &scaled,
                    |x, y| *out.alpha.get(x, y) >= 0.5,
                    &gt_depth,
                )
                .expect("same size")
                {
                    depth_err_sum += l1;
                    depth_err_n += 1;
                }
                for &d in gt_depth.as_slice() {
                    if d > 0.0 {
                        scene_depth_sum += d;
                        scene_depth_n += 1;
                    }
                }
            }
            renders.push((kf.id, out));
        }
        let n = self.graph.keyframes.len().max(1) as f64;

        let report = RunReport {
            counters: self.counters,
            gaussian_count: self.map.len(),
            ate_rmse_cm: ate,
            psnr_db: psnr_sum / n,
            ssim: ssim_sum / n,
            depth_l1_cm: (depth_err_n > 0).then(|| depth_err_sum / depth_err_n as f64),
            depth_scale,
            mean_scene_depth_m: (scene_depth_n > 0)
                .then(|| scene_depth_sum / scene_depth_n as f64),
            trajectory_span_m: span,
        };
        Ok(RunOutput {
            report,
            map: self.map,
            graph: self.graph,
            proxies: self.proxies,
            intrinsics: self.intrinsics,
            estimated,
            renders,
        })
    }
}

/// Online/final global bundle adjustment over a dedicated all-keyframe graph:
/// scale normalization, temporal plus flow-proximity edges, then DBA/DSPO
/// alternation. The temporary edges are dropped afterwards.
pub fn run_global_ba<S: FrameSource>(
    graph: &mut FactorGraph,
    source: &S,
    intrinsics: &Intrinsics,
    config: &RunConfig,
    fit_done: &mut BTreeSet<KeyframeId>,
) -> Result<(), TrackError> {
    let n = graph.keyframes.len();
    if n < 2 {
        return Ok(());
    }
    normalize_scale(&mut graph.keyframes);

    let existing: BTreeSet<(usize, usize)> = graph
        .edges
        .iter()
        .map(|e| (e.from.0, e.to.0))
        .collect();
    // Temporal neighbors always participate.
    let mut wanted: BTreeSet<(usize, usize)> = BTreeSet::new();
    for i in 0..n - 1 {
        wanted.insert((i, i + 1));
        wanted.insert((i + 1, i));
    }
    // Proximity edges by mean-flow distance, capped per node.
    let mut per_node = vec![0usize; n];
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for i in 0..n {
        for j in i + 2..n {
            let flow = source.mean_flow(
                graph.keyframes[i].frame_index,
                graph.keyframes[j].frame_index,
            );
            if flow < 2.0 * config.tracking.tau_loop {
                candidates.push((flow, i, j));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then((a.1, a.2).cmp(&(b.1, b.2))));
    for (_, i, j) in candidates {
        if per_node[i] >= 8 || per_node[j] >= 8 {
            continue;
        }
        per_node[i] += 1;
        per_node[j] += 1;
        wanted.insert((i, j));
        wanted.insert((j, i));
    }

    let mut added = 0usize;
    for (i, j) in wanted {
        if existing.contains(&(i, j)) {
            continue;
        }
        let flow = source.flow(
            graph.keyframes[i].frame_index,
            graph.keyframes[j].frame_index,
        );
        graph.edges.push(FlowEdge {
            from: KeyframeId(i),
            to: KeyframeId(j),
            target: flow.target,
            weight: flow.confidence,
            kind: EdgeKind::Global,
        });
        added += 1;
    }

    let active: BTreeSet<usize> = (0..n).collect();
    let ctx = BaContext::with_first_fixed(active.iter().copied());
    let result = (|| {
        let mut classified = false;
        let mut fits_ok = false;
        for _ in 0..config.tracking.global_ba_rounds {
            let r1 = dba_step(graph, intrinsics, &ctx)?;
            let r2 = dba_step(graph, intrinsics, &ctx)?;
            if !config.ablations.no_mono_depth {
                if !classified {
                    fits_ok = true;
                    for i in 0..n {
                        let (counts, mask) = classify_disparities(
                            &graph.keyframes,
                            i,
                            intrinsics,
                            config.tracking.eta,
                            config.tracking.n_consistency,
                        );
                        let kf = &mut graph.keyframes[i];
                        kf.consistency = counts;
                        kf.low_error = mask;
                        // Scale normalization rescaled disparities; refit.
                        if let Ok((theta, gamma)) = fit_scale_shift(&graph.keyframes[i]) {
                            let kf = &mut graph.keyframes[i];
                            kf.scale = theta;
                            kf.shift = gamma;
                            fit_done.insert(KeyframeId(i));
                        } else {
                            fits_ok = false;
                        }
                    }
                    classified = true;
                }
                if !fits_ok {
                    continue;
                }
                dspo_step(
                    graph,
                    intrinsics,
                    &ctx,
                    config.tracking.alpha1,
                    config.tracking.alpha2,
                )?;
            }
            if r1.accepted && r2.accepted && r1.max_pose_step.max(r2.max_pose_step) < 1e-10 {
                break;
            }
        }
        Ok(())
    })();

    // Global edges are rebuilt next time; keep the persistent graph lean.
    if added > 0 {
        graph.edges.retain(|e| e.kind != EdgeKind::Global);
    }
    result
}
