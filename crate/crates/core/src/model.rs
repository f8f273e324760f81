//! The reconstructor: semantic encoding, triplane decoding and the
//! geometry-conditioned refinement pass.
//!
//! Parameter names start with `sem.`, `dec.` or `field.` for the backbone and
//! with `geo.` or `fuser.` for the refiner.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoders::{self, EncoderConfig, GeometryInput, TokenGrid};
use crate::error::{Error, Result};
use crate::geofuser::{FusionMode, FusionNetwork};
use crate::params::{ParamStore, ParamVars};
use crate::scenekit::{CameraPose, ViewRecord, SQRT3};
use crate::tensor::Tensor;
use crate::triplane::{self, DecoderConfig, RenderOptions, RenderedImages, TriplaneField};
use crate::util::{derive_seed, rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Side of the conditioning images.
    pub image_res: usize,
    pub patch: usize,
    pub dim: usize,
    pub encoder_depth: usize,
    pub heads: usize,
    pub plane_res: usize,
    pub decoder_depth: usize,
    pub samples: usize,
    /// Side of the rendered supervision views.
    pub render_res: usize,
    /// Side of the geometry maps fed back to the geometry encoder.
    pub geometry_res: usize,
    pub fusion_hidden: usize,
    /// Rendered depth is divided by this before entering the geometry encoder.
    pub depth_divisor: f64,
    pub tv_grid: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_res: 32,
            patch: 8,
            dim: 32,
            encoder_depth: 2,
            heads: 2,
            plane_res: 8,
            decoder_depth: 1,
            samples: 24,
            render_res: 16,
            geometry_res: 32,
            fusion_hidden: 32,
            depth_divisor: crate::scenekit::camera::RADIUS_HI + SQRT3,
            tv_grid: 16,
        }
    }
}

impl ModelConfig {
    pub fn semantic(&self) -> EncoderConfig {
        EncoderConfig {
            image_res: self.image_res,
            patch: self.patch,
            channels: 3,
            dim: self.dim,
            depth: self.encoder_depth,
            heads: self.heads,
        }
    }

    pub fn geometric(&self) -> EncoderConfig {
        EncoderConfig { channels: 4, ..self.semantic() }
    }

    pub fn decoder(&self) -> DecoderConfig {
        DecoderConfig { res: self.plane_res, dim: self.dim, depth: self.decoder_depth, heads: self.heads }
    }

    pub fn render_options(&self, res: usize) -> RenderOptions {
        RenderOptions { res, samples: self.samples, normal_step: 2.0 / self.plane_res as f64 }
    }

    pub fn validate(&self) -> Result<()> {
        self.semantic().validate()?;
        if self.plane_res < 2 {
            return Err(Error::Config("plane_res must be at least 2".into()));
        }
        if self.samples < 8 {
            return Err(Error::Config("samples must be at least 8".into()));
        }
        for (name, r) in [("render_res", self.render_res), ("geometry_res", self.geometry_res)] {
            if r == 0 || !self.image_res.is_multiple_of(r) {
                return Err(Error::Config(format!("{name} {r} must divide image_res {}", self.image_res)));
            }
        }
        if !self.render_res.is_multiple_of(8) {
            return Err(Error::Config("render_res must be a multiple of 8".into()));
        }
        if self.fusion_hidden == 0 || self.tv_grid < 2 || self.depth_divisor <= 0.0 {
            return Err(Error::Config("fusion_hidden, tv_grid and depth_divisor must be positive".into()));
        }
        Ok(())
    }
}

/// Refiner variants: the proposed configuration and its ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    RandomInit,
    TokenConcat,
    NormalOnly,
    DepthOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 5] =
        [Ablation::None, Ablation::RandomInit, Ablation::TokenConcat, Ablation::NormalOnly, Ablation::DepthOnly];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::RandomInit => "random-init",
            Ablation::TokenConcat => "token-concat",
            Ablation::NormalOnly => "normal-only",
            Ablation::DepthOnly => "depth-only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }

    pub fn fusion(self) -> FusionMode {
        if self == Ablation::TokenConcat {
            FusionMode::TokenConcat
        } else {
            FusionMode::Residual
        }
    }

    pub fn geometry_input(self) -> GeometryInput {
        match self {
            Ablation::NormalOnly => GeometryInput::NormalOnly,
            Ablation::DepthOnly => GeometryInput::DepthOnly,
            _ => GeometryInput::Both,
        }
    }
}

pub fn is_backbone(name: &str) -> bool {
    name.starts_with("sem.") || name.starts_with("dec.") || name.starts_with("field.")
}

pub fn is_refiner(name: &str) -> bool {
    name.starts_with("geo.") || name.starts_with("fuser.")
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    /// Present once a refiner has been attached.
    pub refiner: Option<Ablation>,
}

impl Model {
    /// Fresh backbone.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut r = rng(derive_seed(seed, &[0xba5e]));
        encoders::init_encoder(&mut params, &mut r, encoders::SEMANTIC, &config.semantic());
        triplane::init_decoder(&mut params, &mut r, &config.decoder());
        triplane::init_field(&mut params, &mut r, config.dim);
        Ok(Self { config, params, refiner: None })
    }

    /// Adds a geometry encoder and a zero-initialized fusion network.
    pub fn attach_refiner(&mut self, ablation: Ablation, seed: u64) -> Result<()> {
        let mut r = rng(derive_seed(seed, &[0x9e0]));
        let sem = self.config.semantic();
        if ablation == Ablation::RandomInit {
            encoders::init_geoformer_random(&mut self.params, &mut r, &sem);
        } else {
            encoders::init_geoformer_from_semantic(&mut self.params, &sem)?;
        }
        FusionNetwork::new(&mut self.params, &mut r, ablation.fusion(), self.config.dim, self.config.fusion_hidden);
        self.refiner = Some(ablation);
        Ok(())
    }

    /// Drops refiner parameters, leaving the backbone alone.
    pub fn detach_refiner(&mut self) {
        self.params.remove_prefix(&format!("{}.", encoders::GEOMETRIC));
        self.params.remove_prefix(&format!("{}.", crate::geofuser::PREFIX));
        self.refiner = None;
    }

    pub fn fusion(&self) -> Result<Option<FusionNetwork>> {
        match self.refiner {
            None => Ok(None),
            Some(a) => FusionNetwork::from_store(&self.params, a.fusion(), self.config.dim).map(Some),
        }
    }

    pub fn backbone_hash(&self) -> String {
        self.params.hash(is_backbone)
    }
}

/// Geometry maps of one conditioning view rendered from a previous reconstruction.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometryMaps {
    pub res: usize,
    pub depth: Vec<f64>,
    pub normal: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionState {
    pub step: usize,
    /// `[3, R, R, d]`.
    pub planes: Tensor,
    /// Maps that conditioned this step; absent on the initial pass.
    pub geometry: Option<Vec<GeometryMaps>>,
}

/// Renders a reconstruction without recording gradients.
pub fn render_planes(model: &Model, planes: &Tensor, camera: &CameraPose, res: usize) -> Result<RenderedImages> {
    Ok(render_planes_counted(model, planes, camera, res)?.0)
}

/// Like [`render_planes`], also returning the operation count of the render.
pub fn render_planes_counted(
    model: &Model,
    planes: &Tensor,
    camera: &CameraPose,
    res: usize,
) -> Result<(RenderedImages, u64)> {
    let mut g = Graph::new();
    let pv = ParamVars::bind(&mut g, &model.params, |_| false);
    let planes = g.constant(planes.clone());
    let field = TriplaneField { planes, params: &pv };
    let v = triplane::render_view(&mut g, &field, camera, &model.config.render_options(res))?;
    Ok((v.images(&g), g.flops()))
}

pub fn render_geometry(model: &Model, planes: &Tensor, camera: &CameraPose) -> Result<(GeometryMaps, u64)> {
    let (img, flops) = render_planes_counted(model, planes, camera, model.config.geometry_res)?;
    Ok((GeometryMaps { res: img.res, depth: img.depth, normal: img.normal }, flops))
}

/// Nearest-neighbour enlargement of an `r × r × c` buffer by an integer factor.
pub fn upscale(x: &[f64], r: usize, c: usize, factor: usize) -> Vec<f64> {
    if factor == 1 {
        return x.to_vec();
    }
    let big = r * factor;
    let mut out = Vec::with_capacity(big * big * c);
    for y in 0..big {
        for xx in 0..big {
            let i = (y / factor) * r + xx / factor;
            out.extend_from_slice(&x[i * c..i * c + c]);
        }
    }
    out
}

pub fn semantic_tokens(g: &mut Graph, pv: &ParamVars, model: &Model, cond: &[ViewRecord]) -> Result<Vec<TokenGrid>> {
    if cond.is_empty() {
        return Err(Error::InvalidArgument("reconstruction needs at least one conditioning view".into()));
    }
    let cfg = model.config.semantic();
    cond.iter()
        .enumerate()
        .map(|(k, v)| encoders::encode_semantic(g, pv, &cfg, &v.rgb, &v.camera, k))
        .collect()
}

/// One reconstruction pass on `g`. Without `prev` the fusion network is
/// bypassed; otherwise the previous reconstruction is rendered (detached) under
/// every conditioning camera, re-encoded and fused with the semantic tokens.
pub fn reconstruct_once(
    g: &mut Graph,
    pv: &ParamVars,
    model: &Model,
    cond: &[ViewRecord],
    sem: &[TokenGrid],
    prev: Option<&ReconstructionState>,
) -> Result<(Var, Option<Vec<GeometryMaps>>)> {
    let dec = model.config.decoder();
    let Some(prev) = prev else {
        return Ok((triplane::decode_triplane(g, pv, &dec, sem)?, None));
    };
    let ablation = model
        .refiner
        .ok_or_else(|| Error::InvalidArgument("refinement pass needs a geometry encoder".into()))?;
    let fusion = model.fusion()?.expect("refiner attached");
    let geo_cfg = model.config.geometric();
    let factor = model.config.image_res / model.config.geometry_res;
    let mut maps = Vec::with_capacity(cond.len());
    let mut fused = Vec::with_capacity(cond.len());
    for (k, (view, s)) in cond.iter().zip(sem).enumerate() {
        let (m, flops) = render_geometry(model, &prev.planes, &view.camera)?;
        g.add_flops(flops);
        let r = model.config.image_res;
        let depth = g.constant(Tensor::new([r * r, 1], upscale(&m.depth, m.res, 1, factor)));
        let normal = g.constant(Tensor::new([r * r, 3], upscale(&m.normal, m.res, 3, factor)));
        let geo = encoders::encode_geometry(
            g,
            pv,
            &geo_cfg,
            depth,
            normal,
            &view.camera,
            model.config.depth_divisor,
            ablation.geometry_input(),
            k,
        )?;
        fused.push(fusion.fuse(g, pv, *s, geo)?);
        maps.push(m);
    }
    Ok((triplane::decode_triplane(g, pv, &dec, &fused)?, Some(maps)))
}

/// Runs `iterations` passes (the first one unrefined) and returns every state.
pub fn infer(model: &Model, cond: &[ViewRecord], iterations: usize) -> Result<Vec<ReconstructionState>> {
    Ok(infer_counted(model, cond, iterations)?.0)
}

/// Like [`infer`], also returning the operation count of every pass.
pub fn infer_counted(
    model: &Model,
    cond: &[ViewRecord],
    iterations: usize,
) -> Result<(Vec<ReconstructionState>, Vec<u64>)> {
    if iterations == 0 {
        return Err(Error::InvalidArgument("iterations must be at least 1".into()));
    }
    let mut g = Graph::new();
    let pv = ParamVars::bind(&mut g, &model.params, |_| false);
    let sem = semantic_tokens(&mut g, &pv, model, cond)?;
    let mut states: Vec<ReconstructionState> = Vec::with_capacity(iterations);
    let mut flops = Vec::with_capacity(iterations);
    let mut last = 0;
    for step in 0..iterations {
        let (planes, geometry) = reconstruct_once(&mut g, &pv, model, cond, &sem, states.last())?;
        states.push(ReconstructionState { step, planes: g.value(planes).clone(), geometry });
        flops.push(g.flops() - last);
        last = g.flops();
    }
    Ok((states, flops))
}
