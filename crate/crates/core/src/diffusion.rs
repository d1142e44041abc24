//! Photon diffusion through a scattering slab: the analytic infinite-medium
//! PSF, a two-convolution low-fidelity ToF model and an explicit
//! finite-difference solver used as the high-fidelity simulator.
//!
//! Geometry: light enters at depth 0 at the lateral origin, the object plane
//! sits at depth `slab_thickness` and the camera images the exit face at
//! depth `2 * slab_thickness`. Camera pixels and object pixels share one
//! lateral grid of pitch `pixel_pitch`, centered on the source axis.
//! Videos are background-subtracted (object-free minus object) and divided
//! by the peak of the object-free video.

use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::degrade::add_noise;
use crate::error::{ensure, Error, Result};
use crate::image::{Image, Measurement, MeasurementShape};
use crate::nn::RngStream;

/// Speed of light in vacuum, cm/ps.
pub const C_VACUUM: f64 = 0.029_979_245_8;

/// Absorption of a fully dark object pixel relative to the medium.
pub const OBJECT_ABSORPTION_FACTOR: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MediumSpec {
    /// 1/cm
    pub mu_a: f64,
    /// 1/cm
    pub mu_s: f64,
    /// cm/ps
    pub c: f64,
    /// Thickness of each of the two slabs around the object plane, cm.
    pub slab_thickness: f64,
}

impl Default for MediumSpec {
    fn default() -> Self {
        MediumSpec {
            mu_a: 0.09,
            mu_s: 16.5,
            c: C_VACUUM / 1.44,
            slab_thickness: 2.5,
        }
    }
}

impl MediumSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.mu_a >= 0.0 && self.mu_a.is_finite(),
            Config,
            "mu_a must be >= 0, got {}",
            self.mu_a
        );
        ensure!(
            self.mu_s > 0.0 && self.mu_s.is_finite(),
            Config,
            "mu_s must be > 0"
        );
        ensure!(self.c > 0.0 && self.c.is_finite(), Config, "c must be > 0");
        ensure!(
            self.slab_thickness > 0.0,
            Config,
            "slab_thickness must be > 0"
        );
        Ok(())
    }

    /// `D = 1 / (3 (mu_a + mu_s))`, cm.
    pub fn diffusion_length(&self) -> f64 {
        1.0 / (3.0 * (self.mu_a + self.mu_s))
    }
}

/// Infinite-medium response at distance `r` (cm), `dt_` ps after a unit
/// impulse.
pub fn diffusion_psf(r: f64, dt_: f64, medium: &MediumSpec) -> Result<f64> {
    ensure!(
        dt_ > 0.0,
        InvalidInput,
        "elapsed time must be > 0, got {dt_}"
    );
    let dc = medium.diffusion_length() * medium.c;
    Ok(medium.c / (4.0 * PI * dc * dt_).powf(1.5)
        * (-r * r / (4.0 * dc * dt_)).exp()
        * (-medium.mu_a * medium.c * dt_).exp())
}

/// Camera sampling of the exit face.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VideoSpec {
    pub frames: usize,
    /// ps
    pub frame_period: f64,
    /// Time of the first frame after the pulse, ps.
    pub t0: f64,
    pub height: usize,
    pub width: usize,
    /// cm
    pub pixel_pitch: f64,
    /// Time step of the low-fidelity convolution quadrature, ps.
    pub quad_dt: f64,
}

impl Default for VideoSpec {
    fn default() -> Self {
        VideoSpec {
            frames: 20,
            frame_period: 55.0,
            t0: 1800.0,
            height: 14,
            width: 14,
            pixel_pitch: 0.25,
            quad_dt: 20.0,
        }
    }
}

impl VideoSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.frames > 0 && self.height > 0 && self.width > 0,
            Config,
            "video dimensions must be positive"
        );
        ensure!(
            self.frame_period > 0.0 && self.t0 > 0.0 && self.quad_dt > 0.0,
            Config,
            "video times must be positive"
        );
        ensure!(self.pixel_pitch > 0.0, Config, "pixel_pitch must be > 0");
        Ok(())
    }

    pub fn frame_time(&self, f: usize) -> f64 {
        self.t0 + f as f64 * self.frame_period
    }

    pub fn shape(&self) -> MeasurementShape {
        MeasurementShape {
            frames: self.frames,
            height: self.height,
            width: self.width,
        }
    }

    /// Lateral position (cm) of pixel `i` along an axis of `n` pixels.
    fn pixel_center(&self, i: usize, n: usize) -> f64 {
        (i as f64 - (n as f64 - 1.0) / 2.0) * self.pixel_pitch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToFVideo {
    pub frames: usize,
    pub frame_period: f64,
    pub t0: f64,
    pub height: usize,
    pub width: usize,
    pub pixel_pitch: f64,
    pub data: Vec<f64>,
}

impl ToFVideo {
    fn from_spec(spec: &VideoSpec, data: Vec<f64>) -> Self {
        ToFVideo {
            frames: spec.frames,
            frame_period: spec.frame_period,
            t0: spec.t0,
            height: spec.height,
            width: spec.width,
            pixel_pitch: spec.pixel_pitch,
            data,
        }
    }

    pub fn to_measurement(&self) -> Result<Measurement> {
        Measurement::new(
            MeasurementShape {
                frames: self.frames,
                height: self.height,
                width: self.width,
            },
            self.data.clone(),
        )
    }
}

/// Finite-difference grid. `nx` runs along image columns, `nz` along depth
/// and `ny` (3-D mode only) along image rows. Cells are the unknowns; the
/// Dirichlet boundary lies one cell beyond the array on every side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub nx: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ny: Option<usize>,
    pub nz: usize,
    /// cm
    pub dx: f64,
    /// ps
    pub dt: f64,
    pub n_steps: usize,
}

impl GridSpec {
    /// Builds a grid, rejecting time steps above the explicit stability bound.
    pub fn new(
        nx: usize,
        ny: Option<usize>,
        nz: usize,
        dx: f64,
        dt: f64,
        n_steps: usize,
        medium: &MediumSpec,
    ) -> Result<Self> {
        let g = GridSpec {
            nx,
            ny,
            nz,
            dx,
            dt,
            n_steps,
        };
        g.validate(medium)?;
        Ok(g)
    }

    pub fn dim(&self) -> usize {
        if self.ny.is_some() {
            3
        } else {
            2
        }
    }

    pub fn cells(&self) -> usize {
        self.nx * self.ny.unwrap_or(1) * self.nz
    }

    /// `dx^2 / (2 dim D c)`
    pub fn max_stable_dt(dx: f64, dim: usize, medium: &MediumSpec) -> f64 {
        dx * dx / (2.0 * dim as f64 * medium.diffusion_length() * medium.c)
    }

    pub fn validate(&self, medium: &MediumSpec) -> Result<()> {
        medium.validate()?;
        ensure!(
            self.nx > 0 && self.nz > 0 && self.ny != Some(0),
            Config,
            "grid dimensions must be positive"
        );
        ensure!(
            self.dx > 0.0 && self.dt > 0.0,
            Config,
            "dx and dt must be > 0"
        );
        let bound = Self::max_stable_dt(self.dx, self.dim(), medium);
        ensure!(
            self.dt <= bound * (1.0 + 1e-12),
            Config,
            "dt = {} ps exceeds the stability bound {bound} ps for dx = {} cm",
            self.dt,
            self.dx
        );
        Ok(())
    }
}

/// Explicit-Euler integrator for `c^-1 dPhi/dt + mu_a Phi - D lap Phi = 0`
/// with per-cell absorption. Absorption is applied as an exact decay factor
/// after each diffusion step.
#[derive(Debug, Clone)]
pub struct FdSolver {
    grid: GridSpec,
    coef: f64,
    decay: Vec<f64>,
    cur: Vec<f64>,
    next: Vec<f64>,
    step: usize,
}

impl FdSolver {
    /// `mu_a` holds one absorption coefficient per cell (layout `[z][y][x]`),
    /// or `None` for the uniform medium.
    pub fn new(medium: &MediumSpec, grid: GridSpec, mu_a: Option<&[f64]>) -> Result<Self> {
        grid.validate(medium)?;
        let n = grid.cells();
        let decay = match mu_a {
            Some(m) => {
                ensure!(
                    m.len() == n,
                    InvalidInput,
                    "absorption map has {} cells, grid {n}",
                    m.len()
                );
                m.iter().map(|&a| (-a * medium.c * grid.dt).exp()).collect()
            }
            None => vec![(-medium.mu_a * medium.c * grid.dt).exp(); n],
        };
        Ok(FdSolver {
            grid,
            coef: medium.c * grid.dt * medium.diffusion_length() / (grid.dx * grid.dx),
            decay,
            cur: vec![0.0; n],
            next: vec![0.0; n],
            step: 0,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn index(&self, iz: usize, iy: usize, ix: usize) -> usize {
        (iz * self.grid.ny.unwrap_or(1) + iy) * self.grid.nx + ix
    }

    /// Adds `amount` photons per unit volume to a cell.
    pub fn inject(&mut self, iz: usize, iy: usize, ix: usize, amount: f64) {
        let i = self.index(iz, iy, ix);
        self.cur[i] += amount;
    }

    pub fn field(&self) -> &[f64] {
        &self.cur
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.grid.dt
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn step(&mut self) -> Result<()> {
        let (nx, ny, nz) = (self.grid.nx, self.grid.ny.unwrap_or(1), self.grid.nz);
        let three_d = self.grid.ny.is_some();
        let centre = 2.0 * self.grid.dim() as f64;
        let plane = nx * ny;
        let cur = &self.cur;
        for iz in 0..nz {
            for iy in 0..ny {
                let row = (iz * ny + iy) * nx;
                for ix in 0..nx {
                    let i = row + ix;
                    let v = cur[i];
                    let mut nb = 0.0;
                    if ix > 0 {
                        nb += cur[i - 1];
                    }
                    if ix + 1 < nx {
                        nb += cur[i + 1];
                    }
                    if three_d {
                        if iy > 0 {
                            nb += cur[i - nx];
                        }
                        if iy + 1 < ny {
                            nb += cur[i + nx];
                        }
                    }
                    if iz > 0 {
                        nb += cur[i - plane];
                    }
                    if iz + 1 < nz {
                        nb += cur[i + plane];
                    }
                    self.next[i] = (v + self.coef * (nb - centre * v)) * self.decay[i];
                }
            }
        }
        std::mem::swap(&mut self.cur, &mut self.next);
        self.step += 1;
        if let Some(i) = self.cur.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                context: "fd_solve".into(),
                step: self.step,
                detail: format!("non-finite flux at cell {i}"),
            });
        }
        Ok(())
    }
}

/// Entry-face illumination of [`fd_solve`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Source {
    /// Total injected energy of the pulse at t = 0.
    pub energy: f64,
}

impl Default for Source {
    fn default() -> Self {
        Source { energy: 1.0 }
    }
}

/// Lateral resolution of the finite-difference grid relative to the video.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdResolution {
    pub cells_per_pixel: usize,
    /// Empty pixels added around the object plane on every side.
    pub margin_pixels: usize,
    /// `false` runs one (x, z) slice; the object must then be a single row.
    pub three_d: bool,
}

impl Default for FdResolution {
    fn default() -> Self {
        FdResolution {
            cells_per_pixel: 1,
            margin_pixels: 4,
            three_d: true,
        }
    }
}

impl FdResolution {
    /// Grid aligned with `video`: lateral cells tile the pixels, depth cells
    /// put the object plane on a layer, and `dt` divides the frame period.
    pub fn grid_for(&self, medium: &MediumSpec, video: &VideoSpec) -> Result<GridSpec> {
        ensure!(
            self.cells_per_pixel > 0,
            Config,
            "cells_per_pixel must be > 0"
        );
        if !self.three_d {
            ensure!(
                video.height == 1,
                Config,
                "2-D slice mode needs a single-row video, got height {}",
                video.height
            );
        }
        let dx = video.pixel_pitch / self.cells_per_pixel as f64;
        let layers = medium.slab_thickness / dx;
        ensure!(
            (layers - layers.round()).abs() < 1e-9 && layers.round() >= 1.0,
            Config,
            "slab thickness {} cm is not a multiple of the cell size {dx} cm",
            medium.slab_thickness
        );
        let m = self.cells_per_pixel;
        let nx = (video.width + 2 * self.margin_pixels) * m;
        let ny = self
            .three_d
            .then_some((video.height + 2 * self.margin_pixels) * m);
        let nz = 2 * layers.round() as usize - 1;
        let dim = if self.three_d { 3 } else { 2 };
        let bound = GridSpec::max_stable_dt(dx, dim, medium);
        // At the bound itself the stencil decouples odd and even cells.
        let sub = (video.frame_period / (0.5 * bound)).ceil().max(1.0);
        let dt = video.frame_period / sub;
        let last = video.frame_time(video.frames - 1);
        let n_steps = (last / dt).round() as usize;
        GridSpec::new(nx, ny, nz, dx, dt, n_steps, medium)
    }
}

/// Runs the finite-difference model for `object` (values in [0, 1], 1 fully
/// dark) and returns the normalized background-subtracted exit-face video.
pub fn fd_solve(
    object: &Image,
    medium: &MediumSpec,
    grid: &GridSpec,
    video: &VideoSpec,
    resolution: &FdResolution,
    source: &Source,
) -> Result<ToFVideo> {
    let sim = FdSimulator::new(*medium, *grid, *video, *resolution, *source)?;
    sim.run(object)
}

/// Finite-difference simulator with its object-free run cached.
#[derive(Debug, Clone)]
pub struct FdSimulator {
    medium: MediumSpec,
    grid: GridSpec,
    video: VideoSpec,
    res: FdResolution,
    source: Source,
    background: Vec<f64>,
    scale: f64,
}

impl FdSimulator {
    pub fn new(
        medium: MediumSpec,
        grid: GridSpec,
        video: VideoSpec,
        res: FdResolution,
        source: Source,
    ) -> Result<Self> {
        video.validate()?;
        grid.validate(&medium)?;
        let m = res.cells_per_pixel;
        ensure!(
            grid.nx == (video.width + 2 * res.margin_pixels) * m
                && grid.ny.map_or(!res.three_d && video.height == 1, |ny| {
                    res.three_d && ny == (video.height + 2 * res.margin_pixels) * m
                }),
            InvalidInput,
            "grid {}x{:?} does not tile a {}x{} video with margin {} and {m} cells per pixel",
            grid.nx,
            grid.ny,
            video.height,
            video.width,
            res.margin_pixels
        );
        ensure!(
            grid.nz >= 3 && grid.nz % 2 == 1,
            InvalidInput,
            "nz must be odd and >= 3"
        );
        let mut sim = FdSimulator {
            medium,
            grid,
            video,
            res,
            source,
            background: vec![],
            scale: 1.0,
        };
        sim.background = sim.exit_video(None)?;
        let peak = sim.background.iter().cloned().fold(0.0, f64::max);
        sim.scale = if peak > 0.0 { 1.0 / peak } else { 1.0 };
        Ok(sim)
    }

    pub fn video_spec(&self) -> &VideoSpec {
        &self.video
    }

    /// Normalized object-free video.
    pub fn background(&self) -> Vec<f64> {
        self.background.iter().map(|v| v * self.scale).collect()
    }

    pub fn run(&self, object: &Image) -> Result<ToFVideo> {
        ensure!(
            object.height() == self.video.height && object.width() == self.video.width,
            InvalidInput,
            "object is {}x{}, video {}x{}",
            object.height(),
            object.width(),
            self.video.height,
            self.video.width
        );
        if self.source.energy == 0.0 {
            return Ok(ToFVideo::from_spec(
                &self.video,
                vec![0.0; self.video.shape().len()],
            ));
        }
        let with = self.exit_video(Some(object))?;
        let data = self
            .background
            .iter()
            .zip(&with)
            .map(|(b, w)| (b - w) * self.scale)
            .collect();
        Ok(ToFVideo::from_spec(&self.video, data))
    }

    fn exit_video(&self, object: Option<&Image>) -> Result<Vec<f64>> {
        let g = self.grid;
        let (nx, ny, nz) = (g.nx, g.ny.unwrap_or(1), g.nz);
        let m = self.res.cells_per_pixel;
        let margin = self.res.margin_pixels * m;
        let obj_layer = nz / 2;
        let absorption = object.map(|obj| {
            let mut mu = vec![self.medium.mu_a; g.cells()];
            for iy in 0..ny {
                for ix in 0..nx {
                    let (Some(px), Some(py)) = (
                        (ix / m).checked_sub(self.res.margin_pixels),
                        if g.ny.is_some() {
                            (iy / m).checked_sub(self.res.margin_pixels)
                        } else {
                            Some(0)
                        },
                    ) else {
                        continue;
                    };
                    if px >= obj.width() || py >= obj.height() {
                        continue;
                    }
                    let x = obj.get(py, px).clamp(0.0, 1.0);
                    mu[(obj_layer * ny + iy) * nx + ix] =
                        self.medium.mu_a * (1.0 + (OBJECT_ABSORPTION_FACTOR - 1.0) * x);
                }
            }
            mu
        });
        let mut solver = FdSolver::new(&self.medium, g, absorption.as_deref())?;
        // Pulse on the first layer, split over the cells nearest the axis.
        let xs = centre_cells(nx);
        let ys = if g.ny.is_some() {
            centre_cells(ny)
        } else {
            vec![0]
        };
        let volume = g.dx.powi(g.dim() as i32);
        let share = self.source.energy * self.medium.c / volume / (xs.len() * ys.len()) as f64;
        for &iy in &ys {
            for &ix in &xs {
                solver.inject(0, iy, ix, share);
            }
        }
        let v = self.video;
        let mut out = vec![0.0; v.shape().len()];
        let norm = 1.0 / (m * if g.ny.is_some() { m } else { 1 }) as f64;
        for f in 0..v.frames {
            let target = (v.frame_time(f) / g.dt).round() as usize;
            while solver.steps_taken() < target {
                solver.step()?;
            }
            let field = solver.field();
            for r in 0..v.height {
                for c in 0..v.width {
                    let mut acc = 0.0;
                    let rows = if g.ny.is_some() { m } else { 1 };
                    for a in 0..rows {
                        for b in 0..m {
                            let iy = if g.ny.is_some() {
                                margin + r * m + a
                            } else {
                                0
                            };
                            let ix = margin + c * m + b;
                            acc += field[((nz - 1) * ny + iy) * nx + ix];
                        }
                    }
                    out[(f * v.height + r) * v.width + c] = acc * norm;
                }
            }
        }
        Ok(out)
    }
}

fn centre_cells(n: usize) -> Vec<usize> {
    if n % 2 == 1 {
        vec![n / 2]
    } else {
        vec![n / 2 - 1, n / 2]
    }
}

/// Two-convolution analytic ToF model, precomputed as a linear operator
/// from object pixels to video samples.
#[derive(Debug, Clone)]
pub struct LowfidTof {
    video: VideoSpec,
    /// `[frame][exit pixel][object pixel]`
    operator: Vec<f64>,
    scale: f64,
}

impl LowfidTof {
    pub fn new(medium: &MediumSpec, video: &VideoSpec) -> Result<Self> {
        medium.validate()?;
        video.validate()?;
        let (h, w) = (video.height, video.width);
        let n = h * w;
        let depth = medium.slab_thickness;
        let dc = medium.diffusion_length() * medium.c;
        let area = video.pixel_pitch * video.pixel_pitch;
        let rows: Vec<f64> = (0..h).map(|i| video.pixel_center(i, h)).collect();
        let cols: Vec<f64> = (0..w).map(|j| video.pixel_center(j, w)).collect();
        let mut operator = vec![0.0; video.frames * n * n];
        for f in 0..video.frames {
            let t = video.frame_time(f);
            let steps = (t / video.quad_dt).ceil() as usize;
            let dt1 = t / steps as f64;
            let block = &mut operator[f * n * n..(f + 1) * n * n];
            // Midpoint rule over the arrival time t1 at the object plane.
            for s in 0..steps {
                let t1 = (s as f64 + 0.5) * dt1;
                let tau = t - t1;
                let mut arrive = vec![0.0; n];
                for (i, &y) in rows.iter().enumerate() {
                    for (j, &x) in cols.iter().enumerate() {
                        let r = (x * x + y * y + depth * depth).sqrt();
                        arrive[i * w + j] = diffusion_psf(r, t1, medium)? * area * dt1;
                    }
                }
                let base = diffusion_psf(depth, tau, medium)?;
                let er: Vec<f64> = (0..h)
                    .map(|d| (-(d as f64 * video.pixel_pitch).powi(2) / (4.0 * dc * tau)).exp())
                    .collect();
                let ec: Vec<f64> = (0..w)
                    .map(|d| (-(d as f64 * video.pixel_pitch).powi(2) / (4.0 * dc * tau)).exp())
                    .collect();
                for qr in 0..h {
                    for qc in 0..w {
                        let out = &mut block[(qr * w + qc) * n..(qr * w + qc + 1) * n];
                        for pr in 0..h {
                            let kr = base * er[qr.abs_diff(pr)];
                            for pc in 0..w {
                                out[pr * w + pc] += arrive[pr * w + pc] * kr * ec[qc.abs_diff(pc)];
                            }
                        }
                    }
                }
            }
        }
        let mut op = LowfidTof {
            video: *video,
            operator,
            scale: 1.0,
        };
        let background = op.raw(&vec![1.0; n]);
        let peak = background.iter().cloned().fold(0.0, f64::max);
        op.scale = if peak > 0.0 { 1.0 / peak } else { 1.0 };
        Ok(op)
    }

    fn raw(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        self.operator
            .chunks_exact(n)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn video_spec(&self) -> &VideoSpec {
        &self.video
    }

    /// Normalized object-free video.
    pub fn background(&self) -> Vec<f64> {
        self.raw(&vec![1.0; self.video.height * self.video.width])
            .into_iter()
            .map(|v| v * self.scale)
            .collect()
    }

    pub fn apply(&self, object: &Image) -> Result<ToFVideo> {
        ensure!(
            object.height() == self.video.height && object.width() == self.video.width,
            InvalidInput,
            "object is {}x{}, video {}x{}",
            object.height(),
            object.width(),
            self.video.height,
            self.video.width
        );
        let data = self
            .raw(object.data())
            .into_iter()
            .map(|v| v * self.scale)
            .collect();
        Ok(ToFVideo::from_spec(&self.video, data))
    }
}

pub fn lowfid_tof(object: &Image, medium: &MediumSpec, video: &VideoSpec) -> Result<ToFVideo> {
    LowfidTof::new(medium, video)?.apply(object)
}

/// Everything needed to simulate ToF measurements of an object, with the
/// expensive precomputations cached on first use.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TofSetup {
    #[serde(default)]
    pub medium: MediumSpec,
    #[serde(default)]
    pub video: VideoSpec,
    #[serde(default)]
    pub resolution: FdResolution,
    #[serde(default)]
    pub source: Source,
    /// Frames kept after simulation.
    #[serde(default = "default_keep_frames")]
    pub keep_frames: usize,
    #[serde(skip)]
    cache: Arc<TofCache>,
}

fn default_keep_frames() -> usize {
    15
}

#[derive(Debug, Default)]
struct TofCache {
    lowfid: OnceLock<LowfidTof>,
    fd: OnceLock<FdSimulator>,
}

impl PartialEq for TofSetup {
    fn eq(&self, other: &Self) -> bool {
        self.medium == other.medium
            && self.video == other.video
            && self.resolution == other.resolution
            && self.source == other.source
            && self.keep_frames == other.keep_frames
    }
}

impl Default for TofSetup {
    fn default() -> Self {
        TofSetup::new(
            MediumSpec::default(),
            VideoSpec::default(),
            FdResolution::default(),
            default_keep_frames(),
        )
    }
}

impl TofSetup {
    pub fn new(
        medium: MediumSpec,
        video: VideoSpec,
        resolution: FdResolution,
        keep_frames: usize,
    ) -> Self {
        TofSetup {
            medium,
            video,
            resolution,
            source: Source::default(),
            keep_frames,
            cache: Arc::default(),
        }
    }

    pub fn validate_for(&self, height: usize, width: usize) -> Result<()> {
        self.medium.validate()?;
        self.video.validate()?;
        ensure!(
            height == self.video.height && width == self.video.width,
            Config,
            "objects are {height}x{width} but the video is {}x{}",
            self.video.height,
            self.video.width
        );
        ensure!(
            (1..=self.video.frames).contains(&self.keep_frames),
            Config,
            "keep_frames must lie in 1..={}",
            self.video.frames
        );
        Ok(())
    }

    pub fn video_shape(&self) -> MeasurementShape {
        MeasurementShape {
            frames: self.keep_frames,
            ..self.video.shape()
        }
    }

    pub fn grid(&self) -> Result<GridSpec> {
        self.resolution.grid_for(&self.medium, &self.video)
    }

    fn lowfid_op(&self) -> Result<&LowfidTof> {
        if let Some(op) = self.cache.lowfid.get() {
            return Ok(op);
        }
        let op = LowfidTof::new(&self.medium, &self.video)?;
        Ok(self.cache.lowfid.get_or_init(|| op))
    }

    fn fd_sim(&self) -> Result<&FdSimulator> {
        if let Some(sim) = self.cache.fd.get() {
            return Ok(sim);
        }
        let sim = FdSimulator::new(
            self.medium,
            self.grid()?,
            self.video,
            self.resolution,
            self.source,
        )?;
        Ok(self.cache.fd.get_or_init(|| sim))
    }

    /// Analytic low-fidelity video, truncated to `keep_frames`.
    pub fn lowfid(&self, object: &Image) -> Result<Measurement> {
        self.lowfid_op()?
            .apply(object)?
            .to_measurement()?
            .truncate_frames(self.keep_frames)
    }

    /// Finite-difference video, truncated to `keep_frames`.
    pub fn highfid(&self, object: &Image) -> Result<Measurement> {
        self.fd_sim()?
            .run(object)?
            .to_measurement()?
            .truncate_frames(self.keep_frames)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionDataset {
    pub paired_x: Vec<Image>,
    pub paired_y: Vec<Measurement>,
    pub unpaired_x: Vec<Image>,
}

/// Simulates high-fidelity measurements (plus noise) for the first
/// `k_highfid` objects; the rest stay unpaired. Noise for object `i` comes
/// from `rng.fork(&[i])`.
pub fn make_diffusion_dataset(
    objects: &[Image],
    setup: &TofSetup,
    snr_db: Option<f64>,
    k_highfid: usize,
    rng: &RngStream,
) -> Result<DiffusionDataset> {
    ensure!(
        k_highfid <= objects.len(),
        InvalidInput,
        "k_highfid = {k_highfid} exceeds the {} objects",
        objects.len()
    );
    let mut paired_y = Vec::with_capacity(k_highfid);
    for (i, x) in objects[..k_highfid].iter().enumerate() {
        setup.validate_for(x.height(), x.width())?;
        let clean = setup.highfid(x)?;
        paired_y.push(add_noise(&clean, snr_db, &mut rng.fork(&[i as u64])));
    }
    Ok(DiffusionDataset {
        paired_x: objects[..k_highfid].to_vec(),
        paired_y,
        unpaired_x: objects[k_highfid..].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tissue_medium() -> MediumSpec {
        MediumSpec {
            mu_a: 0.09,
            mu_s: 16.5,
            ..MediumSpec::default()
        }
    }

    fn small_video() -> VideoSpec {
        VideoSpec {
            frames: 6,
            frame_period: 55.0,
            t0: 200.0,
            height: 4,
            width: 5,
            pixel_pitch: 0.25,
            quad_dt: 20.0,
        }
    }

    fn thin_medium() -> MediumSpec {
        MediumSpec {
            slab_thickness: 0.5,
            ..tissue_medium()
        }
    }

    #[test]
    fn diffusion_length_value() {
        let d = tissue_medium().diffusion_length();
        assert!((d - 1.0 / (3.0 * 16.59)).abs() < 1e-15);
        assert!((d - 0.020092).abs() < 1e-6);
    }

    #[test]
    fn psf_at_origin_is_prefactor() {
        let m = tissue_medium();
        let dc = m.diffusion_length() * m.c;
        let t = 250.0;
        let expected = m.c / (4.0 * PI * dc * t).powf(1.5) * (-m.mu_a * m.c * t).exp();
        assert!((diffusion_psf(0.0, t, &m).unwrap() - expected).abs() < 1e-15 * expected);
        assert!(diffusion_psf(0.1, 0.0, &m).is_err());
        assert!(diffusion_psf(0.1, -3.0, &m).is_err());
    }

    fn psf_integral(m: &MediumSpec, t: f64) -> f64 {
        let dc = m.diffusion_length() * m.c;
        let sigma = (2.0 * dc * t).sqrt();
        let h = sigma / 8.0;
        let n = (8.0 * sigma / h) as i64;
        let mut total = 0.0;
        // radial symmetry: integrate 4 pi r^2 psf(r) dr
        for k in 0..n * 8 {
            let r = (k as f64 + 0.5) * h;
            total += 4.0 * PI * r * r * diffusion_psf(r, t, m).unwrap() * h;
        }
        total / m.c
    }

    #[test]
    fn psf_integral_is_absorption_factor() {
        let mut m = tissue_medium();
        m.mu_a = 0.0;
        assert!((psf_integral(&m, 300.0) - 1.0).abs() < 0.01);
        let m = tissue_medium();
        let t = 300.0;
        let expected = (-m.mu_a * m.c * t).exp();
        assert!((psf_integral(&m, t) / expected - 1.0).abs() < 0.01);
    }

    #[test]
    fn unstable_grid_is_rejected() {
        let m = tissue_medium();
        let bound = GridSpec::max_stable_dt(0.1, 3, &m);
        assert!(GridSpec::new(8, Some(8), 8, 0.1, bound, 10, &m).is_ok());
        assert!(GridSpec::new(8, Some(8), 8, 0.1, bound * 1.01, 10, &m).is_err());
        let bound2 = GridSpec::max_stable_dt(0.1, 2, &m);
        assert!(bound2 > bound);
        assert!(GridSpec::new(8, None, 8, 0.1, bound2, 10, &m).is_ok());
    }

    #[test]
    fn solver_conserves_without_absorption_until_boundary() {
        let mut m = tissue_medium();
        m.mu_a = 0.0;
        let dx = 0.1;
        let g = GridSpec::new(
            15,
            Some(15),
            15,
            dx,
            GridSpec::max_stable_dt(dx, 3, &m),
            0,
            &m,
        )
        .unwrap();
        let mut s = FdSolver::new(&m, g, None).unwrap();
        s.inject(7, 7, 7, 1.0);
        let mut prev: f64 = s.field().iter().sum();
        for _ in 0..200 {
            s.step().unwrap();
            assert!(s.field().iter().all(|&v| v >= 0.0));
            let total: f64 = s.field().iter().sum();
            assert!(total <= prev * (1.0 + 1e-12));
            prev = total;
        }
        assert!(prev < 1.0);
    }

    #[test]
    fn zero_source_gives_zero_video() {
        let m = thin_medium();
        let v = small_video();
        let res = FdResolution {
            margin_pixels: 2,
            ..FdResolution::default()
        };
        let g = res.grid_for(&m, &v).unwrap();
        let mut obj = Image::zeros(4, 5);
        obj.set(1, 2, 1.0);
        let video = fd_solve(&obj, &m, &g, &v, &res, &Source { energy: 0.0 }).unwrap();
        assert!(video.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn fd_video_shapes_and_sign() {
        let m = thin_medium();
        let v = small_video();
        let res = FdResolution {
            margin_pixels: 2,
            ..FdResolution::default()
        };
        let g = res.grid_for(&m, &v).unwrap();
        let sim = FdSimulator::new(m, g, v, res, Source::default()).unwrap();
        let empty = sim.run(&Image::zeros(4, 5)).unwrap();
        assert!(empty.data.iter().all(|&x| x == 0.0));
        let mut obj = Image::zeros(4, 5);
        obj.set(1, 2, 1.0);
        let video = sim.run(&obj).unwrap();
        assert_eq!(video.data.len(), 6 * 20);
        assert!(video.data.iter().all(|&x| x >= 0.0));
        assert!(video.data.iter().any(|&x| x > 0.0));
        let bg = sim.background();
        assert!((bg.iter().cloned().fold(0.0, f64::max) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn doubling_absorption_scales_late_signal() {
        let m1 = MediumSpec {
            mu_a: 0.05,
            ..tissue_medium()
        };
        let m2 = MediumSpec { mu_a: 0.10, ..m1 };
        let dx = 0.1;
        let dt = 0.5 * GridSpec::max_stable_dt(dx, 3, &m1);
        let g = GridSpec::new(21, Some(21), 21, dx, dt, 0, &m1).unwrap();
        let run = |m: &MediumSpec| {
            let mut s = FdSolver::new(m, g, None).unwrap();
            s.inject(10, 10, 10, 1.0);
            for _ in 0..300 {
                s.step().unwrap();
            }
            (s.field()[s.index(12, 10, 10)], s.time())
        };
        let (a, t) = run(&m1);
        let (b, _) = run(&m2);
        let expected = (-(m2.mu_a - m1.mu_a) * m1.c * t).exp();
        // D also shifts slightly with mu_a
        let ratio = b / a / expected;
        assert!((ratio - 1.0).abs() < 0.02, "ratio {ratio}");
    }

    #[test]
    fn lowfid_empty_and_full_objects() {
        let m = thin_medium();
        let v = small_video();
        let op = LowfidTof::new(&m, &v).unwrap();
        let empty = op.apply(&Image::zeros(4, 5)).unwrap();
        assert!(empty.data.iter().all(|&x| x == 0.0));
        let full = op.apply(&Image::filled(4, 5, 1.0)).unwrap();
        for (a, b) in full.data.iter().zip(op.background()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn lowfid_single_pixel_matches_direct_sum() {
        let m = thin_medium();
        let v = small_video();
        let op = LowfidTof::new(&m, &v).unwrap();
        let (pr, pc) = (1, 3);
        let mut obj = Image::zeros(4, 5);
        obj.set(pr, pc, 1.0);
        let got = op.apply(&obj).unwrap();
        let pos = |i: usize, n: usize| (i as f64 - (n as f64 - 1.0) / 2.0) * v.pixel_pitch;
        let (py, px) = (pos(pr, 4), pos(pc, 5));
        let d = m.slab_thickness;
        let mut direct = vec![0.0; got.data.len()];
        for f in 0..v.frames {
            let t = v.frame_time(f);
            let steps = (t / v.quad_dt).ceil() as usize;
            let dt1 = t / steps as f64;
            for qr in 0..4 {
                for qc in 0..5 {
                    let (qy, qx) = (pos(qr, 4), pos(qc, 5));
                    let mut acc = 0.0;
                    for s in 0..steps {
                        let t1 = (s as f64 + 0.5) * dt1;
                        let r1 = (px * px + py * py + d * d).sqrt();
                        let r2 = ((qx - px).powi(2) + (qy - py).powi(2) + d * d).sqrt();
                        acc += diffusion_psf(r1, t1, &m).unwrap()
                            * v.pixel_pitch.powi(2)
                            * dt1
                            * diffusion_psf(r2, t - t1, &m).unwrap();
                    }
                    direct[(f * 4 + qr) * 5 + qc] = acc;
                }
            }
        }
        let raw = op.raw(obj.data());
        for (a, b) in raw.iter().zip(&direct) {
            assert!((a - b).abs() <= 1e-8 * b.abs().max(1e-300), "{a} vs {b}");
        }
        for (a, b) in got.data.iter().zip(&raw) {
            assert!((a - b * op.scale).abs() < 1e-15);
        }
    }

    #[test]
    fn setup_truncates_frames_and_caches() {
        let setup = TofSetup::new(
            thin_medium(),
            small_video(),
            FdResolution {
                margin_pixels: 2,
                ..FdResolution::default()
            },
            4,
        );
        let mut obj = Image::zeros(4, 5);
        obj.set(2, 2, 0.8);
        let lo = setup.lowfid(&obj).unwrap();
        let hi = setup.highfid(&obj).unwrap();
        assert_eq!(lo.shape().frames, 4);
        assert_eq!(hi.shape(), lo.shape());
        assert_eq!(setup.highfid(&obj).unwrap(), hi);
        assert!(setup.validate_for(3, 5).is_err());
    }

    #[test]
    fn dataset_boundaries() {
        let setup = TofSetup::new(
            thin_medium(),
            small_video(),
            FdResolution {
                margin_pixels: 1,
                ..FdResolution::default()
            },
            4,
        );
        let objs: Vec<Image> = (0..3)
            .map(|i| {
                let mut o = Image::zeros(4, 5);
                o.set(i, i, 1.0);
                o
            })
            .collect();
        let rng = RngStream::new(1, 1);
        let none = make_diffusion_dataset(&objs, &setup, Some(20.0), 0, &rng).unwrap();
        assert!(none.paired_x.is_empty() && none.paired_y.is_empty());
        assert_eq!(none.unpaired_x.len(), 3);
        let all = make_diffusion_dataset(&objs, &setup, Some(20.0), 3, &rng).unwrap();
        assert_eq!(all.paired_y.len(), 3);
        assert!(all.unpaired_x.is_empty());
        assert!(all.paired_y.iter().all(|y| y.shape().frames == 4));
        assert!(make_diffusion_dataset(&objs, &setup, None, 4, &rng).is_err());
    }

    #[test]
    fn slice_mode_grid() {
        let m = thin_medium();
        let v = VideoSpec {
            height: 1,
            ..small_video()
        };
        let res = FdResolution {
            three_d: false,
            margin_pixels: 2,
            cells_per_pixel: 2,
        };
        let g = res.grid_for(&m, &v).unwrap();
        assert_eq!(g.dim(), 2);
        let sim = FdSimulator::new(m, g, v, res, Source::default()).unwrap();
        let mut obj = Image::zeros(1, 5);
        obj.set(0, 2, 1.0);
        let video = sim.run(&obj).unwrap();
        assert!(video.data.iter().any(|&x| x > 0.0));
        assert!(res.grid_for(&m, &small_video()).is_err());
    }
}
