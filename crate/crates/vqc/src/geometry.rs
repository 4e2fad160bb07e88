//! Geometry-to-channel pipeline: steering vectors, path loss, Rician
//! channel sampling, the pilot measurement equation and radio-map
//! rendering. Everything here is a pure function of its inputs; RNG
//! state is owned by the caller.

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::GeometryError;

/// 3-D coordinates in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Position {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn distance(&self, other: &Position) -> f64 {
        let (dx, dy, dz) = (self.x - other.x, self.y - other.y, self.z - other.z);
        (dx * dx + dy * dy + dz * dz).sqrt()
    }
}

/// Axis-aligned rectangular service area on a fixed-z plane.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ServiceArea {
    pub center: [f64; 3],
    pub half_extents: [f64; 2],
}

impl ServiceArea {
    pub fn x_range(&self) -> (f64, f64) {
        (
            self.center[0] - self.half_extents[0],
            self.center[0] + self.half_extents[0],
        )
    }

    pub fn y_range(&self) -> (f64, f64) {
        (
            self.center[1] - self.half_extents[1],
            self.center[1] + self.half_extents[1],
        )
    }

    pub fn z(&self) -> f64 {
        self.center[2]
    }

    pub fn contains(&self, p: &Position) -> bool {
        let (x0, x1) = self.x_range();
        let (y0, y1) = self.y_range();
        p.x >= x0 && p.x <= x1 && p.y >= y0 && p.y <= y1
    }
}

/// Placement and array dimensions of the network.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SystemLayout {
    pub bs_position: Position,
    pub ris_positions: Vec<Position>,
    /// BS antenna count.
    pub m: usize,
    /// Reflective elements per RIS.
    pub n: usize,
    /// RIS column count; must divide `n`.
    pub c: usize,
    /// Dimensionless RIS element phase factor 2*pi*d_R/lambda_c.
    pub spacing_ris: f64,
    /// Dimensionless BS antenna phase factor 2*pi*d_A/lambda_c.
    pub spacing_bs: f64,
    pub service_area: ServiceArea,
}

impl SystemLayout {
    pub fn num_ris(&self) -> usize {
        self.ris_positions.len()
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.ris_positions.is_empty() {
            return Err(GeometryError::Degenerate("no RIS positions".into()));
        }
        if self.c == 0 || self.n % self.c != 0 {
            return Err(GeometryError::Degenerate(format!(
                "C = {} must divide N = {}",
                self.c, self.n
            )));
        }
        if self.m == 0 {
            return Err(GeometryError::Degenerate("M must be at least 1".into()));
        }
        if self.spacing_ris <= 0.0 || self.spacing_bs <= 0.0 {
            return Err(GeometryError::Degenerate(
                "spacing factors must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Angles and ranges tying a UE position to one RIS and the BS.
#[derive(Clone, Copy, Debug)]
pub struct AngleSet {
    /// Azimuth AoA, UE to RIS.
    pub mu_ris: f64,
    /// Elevation AoA, UE to RIS.
    pub gamma_ris: f64,
    /// Azimuth AoD, RIS to BS.
    pub phi_ris: f64,
    /// Elevation AoD, RIS to BS.
    pub upsilon_ris: f64,
    /// Elevation AoA of the RIS seen from the BS.
    pub gamma_bs: f64,
    /// Elevation AoA of the UE seen from the BS.
    pub gamma_ue: f64,
    /// UE-RIS range in meters.
    pub r_ur: f64,
    /// RIS-BS range in meters.
    pub r_rb: f64,
}

/// Uplink power, noise power and the pilot symbol.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PilotConfig {
    /// Uplink transmit power, linear.
    pub p_u: f64,
    /// Noise power, linear.
    pub sigma2: f64,
    /// Pilot symbol as (re, im).
    pub pilot_symbol: [f64; 2],
}

impl PilotConfig {
    /// Power from a raw SNR in dB (P_u = 10^(SNR/10)), default noise
    /// power -100 dBm in watts, unit pilot.
    pub fn from_snr_db(snr_db: f64) -> Self {
        Self {
            p_u: 10f64.powf(snr_db / 10.0),
            sigma2: 1e-13,
            pilot_symbol: [1.0, 0.0],
        }
    }

    pub fn pilot(&self) -> Complex64 {
        Complex64::new(self.pilot_symbol[0], self.pilot_symbol[1])
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.p_u <= 0.0 {
            return Err(GeometryError::Degenerate("P_u must be positive".into()));
        }
        if self.sigma2 < 0.0 {
            return Err(GeometryError::Degenerate(
                "noise power must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// One coherence block worth of channels.
#[derive(Clone, Debug)]
pub struct ChannelRealization {
    /// Direct UE-BS channel, length M.
    pub h_d: Array1<Complex64>,
    /// UE-RIS channels, one length-N vector per RIS.
    pub h_r: Vec<Array1<Complex64>>,
    /// RIS-BS channels, one MxN matrix per RIS.
    pub g_r: Vec<Array2<Complex64>>,
    /// Direct path-loss amplitude.
    pub rho: f64,
    /// UE-RIS path-loss amplitudes.
    pub kappa: Vec<f64>,
    /// RIS-BS path-loss amplitudes.
    pub xi: Vec<f64>,
    /// Rician factor.
    pub epsilon: f64,
}

/// Which path of the path-loss model applies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathKind {
    Direct,
    Reflected,
}

/// Angles and ranges for UE `ue` relative to RIS `k` and the BS.
pub fn compute_angles(
    layout: &SystemLayout,
    ue: &Position,
    k: usize,
) -> Result<AngleSet, GeometryError> {
    let ris = &layout.ris_positions[k];
    let bs = &layout.bs_position;

    let r_ur = ue.distance(ris);
    if r_ur <= 0.0 {
        return Err(GeometryError::Degenerate(
            "UE coincides with the RIS".into(),
        ));
    }
    let r_rb = ris.distance(bs);
    if r_rb <= 0.0 {
        return Err(GeometryError::Degenerate(
            "RIS coincides with the BS".into(),
        ));
    }
    let r_ub = ue.distance(bs);
    if r_ub <= 0.0 {
        return Err(GeometryError::Degenerate("UE coincides with the BS".into()));
    }

    // UE -> RIS: sin(g)cos(mu) = dx/r, sin(g)sin(mu) = dy/r,
    // cos(g) = (z_ris - z_ue)/r.
    let (dx, dy, dz) = (ue.x - ris.x, ue.y - ris.y, ris.z - ue.z);
    let gamma_ris = (dz / r_ur).clamp(-1.0, 1.0).acos();
    let mu_ris = dy.atan2(dx);

    // RIS -> BS: cos(phi)sin(ups) = dx'/r, sin(phi)sin(ups) = dy'/r,
    // sin(gamma_bs) = dz'/r.
    let (dxb, dyb, dzb) = (ris.x - bs.x, ris.y - bs.y, ris.z - bs.z);
    let lateral = (dxb * dxb + dyb * dyb).sqrt();
    let upsilon_ris = (lateral / r_rb).clamp(-1.0, 1.0).asin();
    let phi_ris = dyb.atan2(dxb);
    let gamma_bs = (dzb / r_rb).clamp(-1.0, 1.0).asin();

    let gamma_ue = ((ue.z - bs.z) / r_ub).clamp(-1.0, 1.0).asin();

    Ok(AngleSet {
        mu_ris,
        gamma_ris,
        phi_ris,
        upsilon_ris,
        gamma_bs,
        gamma_ue,
        r_ur,
        r_rb,
    })
}

/// RIS steering vector: element n has phase
/// spacing * (v1(n,C) sin(mu) cos(gamma) + v2(n,C) sin(gamma))
/// with v1(n,C) = mod(n-1, C) and v2(n,C) = floor((n-1)/C) for
/// 1-based n.
pub fn ris_steering(
    mu: f64,
    gamma: f64,
    n: usize,
    c: usize,
    spacing: f64,
) -> Result<Array1<Complex64>, GeometryError> {
    if c == 0 || n % c != 0 {
        return Err(GeometryError::Degenerate(format!(
            "C = {c} must divide N = {n}"
        )));
    }
    let horizontal = mu.sin() * gamma.cos();
    let vertical = gamma.sin();
    let v = (0..n)
        .map(|idx| {
            let v1 = (idx % c) as f64;
            let v2 = (idx / c) as f64;
            Complex64::from_polar(1.0, spacing * (v1 * horizontal + v2 * vertical))
        })
        .collect();
    Ok(Array1::from_vec(v))
}

/// Uniform linear BS steering vector: element m has phase
/// spacing * (m-1) cos(gamma).
pub fn bs_steering(gamma: f64, m: usize, spacing: f64) -> Array1<Complex64> {
    let phase_step = spacing * gamma.cos();
    Array1::from_iter((0..m).map(|i| Complex64::from_polar(1.0, phase_step * i as f64)))
}

/// Linear path-loss amplitude 10^(-PL_dB/20) with
/// PL_dB = 32.6 + 36.7 log10(d) for the direct path and
/// PL_dB = 30 + 22 log10(d) for reflected paths.
pub fn path_loss_amplitude(kind: PathKind, distance: f64) -> Result<f64, GeometryError> {
    if distance <= 0.0 {
        return Err(GeometryError::NonpositiveDistance(distance));
    }
    let pl_db = match kind {
        PathKind::Direct => 32.6 + 36.7 * distance.log10(),
        PathKind::Reflected => 30.0 + 22.0 * distance.log10(),
    };
    Ok(10f64.powf(-pl_db / 20.0))
}

fn complex_gaussian<R: Rng>(rng: &mut R) -> Complex64 {
    // CN(0,1): independent N(0, 1/2) real and imaginary parts.
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// LOS-only channels for a UE position (the Rician limit of infinite
/// factor): each channel equals its path-loss-scaled LOS component.
pub fn los_channel(
    layout: &SystemLayout,
    ue: &Position,
) -> Result<ChannelRealization, GeometryError> {
    let k_total = layout.num_ris();
    let angles0 = compute_angles(layout, ue, 0)?;
    let rho = path_loss_amplitude(PathKind::Direct, ue.distance(&layout.bs_position))?;
    let h_d = bs_steering(angles0.gamma_ue, layout.m, layout.spacing_bs).mapv(|v| v * rho);

    let mut h_r = Vec::with_capacity(k_total);
    let mut g_r = Vec::with_capacity(k_total);
    let mut kappa = Vec::with_capacity(k_total);
    let mut xi = Vec::with_capacity(k_total);
    for k in 0..k_total {
        let a = compute_angles(layout, ue, k)?;
        let kap = path_loss_amplitude(PathKind::Reflected, a.r_ur)?;
        let x = path_loss_amplitude(PathKind::Reflected, a.r_rb)?;
        let u_ue = ris_steering(a.mu_ris, a.gamma_ris, layout.n, layout.c, layout.spacing_ris)?;
        h_r.push(u_ue.mapv(|v| v * kap));

        let u_bs = bs_steering(a.gamma_bs, layout.m, layout.spacing_bs);
        let u_dep = ris_steering(
            a.phi_ris,
            a.upsilon_ris,
            layout.n,
            layout.c,
            layout.spacing_ris,
        )?;
        // G_LOS = u_bs . u_dep^H, scaled by the path loss.
        let mut g = Array2::zeros((layout.m, layout.n));
        for i in 0..layout.m {
            for j in 0..layout.n {
                g[(i, j)] = u_bs[i] * u_dep[j].conj() * x;
            }
        }
        g_r.push(g);
        kappa.push(kap);
        xi.push(x);
    }

    Ok(ChannelRealization {
        h_d,
        h_r,
        g_r,
        rho,
        kappa,
        xi,
        epsilon: f64::INFINITY,
    })
}

/// Draw a Rician block-fading realization for a UE position.
///
/// Each channel is pathloss * (sqrt(eps/(1+eps)) LOS +
/// sqrt(1/(1+eps)) NLOS) with i.i.d. CN(0,1) NLOS entries. Draw order
/// is fixed: h_d entries, then per RIS h_r entries followed by the
/// row-major entries of G_r.
pub fn sample_channel<R: Rng>(
    layout: &SystemLayout,
    ue: &Position,
    epsilon: f64,
    rng: &mut R,
) -> Result<ChannelRealization, GeometryError> {
    let los = los_channel(layout, ue)?;
    let w_los = (epsilon / (1.0 + epsilon)).sqrt();
    let w_nlos = (1.0 / (1.0 + epsilon)).sqrt();

    let h_d = los
        .h_d
        .mapv(|v| v * w_los + complex_gaussian(rng) * (w_nlos * los.rho));

    let mut h_r = Vec::with_capacity(layout.num_ris());
    let mut g_r = Vec::with_capacity(layout.num_ris());
    for k in 0..layout.num_ris() {
        h_r.push(
            los.h_r[k].mapv(|v| v * w_los + complex_gaussian(rng) * (w_nlos * los.kappa[k])),
        );
        g_r.push(
            los.g_r[k].mapv(|v| v * w_los + complex_gaussian(rng) * (w_nlos * los.xi[k])),
        );
    }

    Ok(ChannelRealization {
        h_d,
        h_r,
        g_r,
        rho: los.rho,
        kappa: los.kappa,
        xi: los.xi,
        epsilon,
    })
}

/// Cascade UE-RIS-BS channel diag(h_r) . G_r^T of shape N x M.
pub fn cascade_channel(
    h_r: &Array1<Complex64>,
    g_r: &Array2<Complex64>,
) -> Result<Array2<Complex64>, GeometryError> {
    let n = h_r.len();
    let m = g_r.nrows();
    if g_r.ncols() != n {
        return Err(GeometryError::Shape(format!(
            "h_r has {} elements but G_r is {}x{}",
            n,
            g_r.nrows(),
            g_r.ncols()
        )));
    }
    let mut out = Array2::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            out[(i, j)] = h_r[i] * g_r[(j, i)];
        }
    }
    Ok(out)
}

/// Received pilot after analog combining:
/// y = sqrt(P_u) w^T (h_d + sum_k H_ck^T theta_k) x + noise.
///
/// The noise term is supplied by the caller so the measurement itself
/// is deterministic.
pub fn measure_pilot(
    ch: &ChannelRealization,
    w: &Array1<Complex64>,
    thetas: &[Array1<Complex64>],
    cfg: &PilotConfig,
    noise: Complex64,
) -> Result<Complex64, GeometryError> {
    if thetas.len() != ch.h_r.len() {
        return Err(GeometryError::Shape(format!(
            "{} RIS codewords supplied for {} RISs",
            thetas.len(),
            ch.h_r.len()
        )));
    }
    if w.len() != ch.h_d.len() {
        return Err(GeometryError::Shape(format!(
            "beamformer length {} does not match {} antennas",
            w.len(),
            ch.h_d.len()
        )));
    }
    let mut effective = ch.h_d.clone();
    for (k, theta) in thetas.iter().enumerate() {
        if theta.len() != ch.h_r[k].len() {
            return Err(GeometryError::Shape(format!(
                "RIS codeword {k} has length {}, expected {}",
                theta.len(),
                ch.h_r[k].len()
            )));
        }
        let hc = cascade_channel(&ch.h_r[k], &ch.g_r[k])?;
        // H_c^T theta: (M x N) x (N)
        for j in 0..effective.len() {
            let mut acc = Complex64::new(0.0, 0.0);
            for i in 0..theta.len() {
                acc += hc[(i, j)] * theta[i];
            }
            effective[j] += acc;
        }
    }
    let combined: Complex64 = w.iter().zip(effective.iter()).map(|(a, b)| a * b).sum();
    Ok(combined * cfg.pilot() * cfg.p_u.sqrt() + noise)
}

/// Which field components a radio map accumulates.
#[derive(Clone, Debug)]
pub struct RssComponents {
    pub include_direct: bool,
    /// Indices of the RISs whose cascade contributes; `None` means all.
    pub active_ris: Option<Vec<usize>>,
}

impl Default for RssComponents {
    fn default() -> Self {
        Self {
            include_direct: true,
            active_ris: None,
        }
    }
}

/// Received-signal-strength map over the service area at 1 m x 1 m
/// resolution, using the deterministic LOS-only channel at each cell.
#[derive(Clone, Debug)]
pub struct RssMap {
    pub x_min: f64,
    pub y_min: f64,
    pub resolution: f64,
    /// Row i, column j holds RSS at cell center
    /// (x_min + (i+0.5) res, y_min + (j+0.5) res).
    pub values: Array2<f64>,
}

impl RssMap {
    pub fn cell_of(&self, p: &Position) -> Option<(usize, usize)> {
        let i = ((p.x - self.x_min) / self.resolution).floor();
        let j = ((p.y - self.y_min) / self.resolution).floor();
        if i < 0.0 || j < 0.0 {
            return None;
        }
        let (i, j) = (i as usize, j as usize);
        if i >= self.values.nrows() || j >= self.values.ncols() {
            return None;
        }
        Some((i, j))
    }

    pub fn median(&self) -> f64 {
        let mut v: Vec<f64> = self.values.iter().copied().collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }
}

/// Complex received field at one position under the LOS-only channel,
/// restricted to the selected components (no noise).
pub fn los_field_at(
    layout: &SystemLayout,
    cell: &Position,
    w: &Array1<Complex64>,
    thetas: &[Array1<Complex64>],
    cfg: &PilotConfig,
    components: &RssComponents,
) -> Result<Complex64, GeometryError> {
    let mut ch = los_channel(layout, cell)?;
    if !components.include_direct {
        ch.h_d.fill(Complex64::new(0.0, 0.0));
    }
    let mut masked: Vec<Array1<Complex64>> = thetas.to_vec();
    if let Some(active) = &components.active_ris {
        for (k, theta) in masked.iter_mut().enumerate() {
            if !active.contains(&k) {
                theta.fill(Complex64::new(0.0, 0.0));
            }
        }
    }
    measure_pilot(&ch, w, &masked, cfg, Complex64::new(0.0, 0.0))
}

/// Render |field|^2 over the service-area grid for fixed codewords.
pub fn rss_map(
    layout: &SystemLayout,
    w: &Array1<Complex64>,
    thetas: &[Array1<Complex64>],
    cfg: &PilotConfig,
    components: &RssComponents,
) -> Result<RssMap, GeometryError> {
    let area = &layout.service_area;
    let (x0, x1) = area.x_range();
    let (y0, y1) = area.y_range();
    let resolution = 1.0;
    let nx = ((x1 - x0) / resolution).round() as usize;
    let ny = ((y1 - y0) / resolution).round() as usize;
    if nx == 0 || ny == 0 {
        return Err(GeometryError::EmptyGrid(format!(
            "service area spans {}x{} cells",
            nx, ny
        )));
    }
    let mut values = Array2::zeros((nx, ny));
    for i in 0..nx {
        for j in 0..ny {
            let cell = Position::new(
                x0 + (i as f64 + 0.5) * resolution,
                y0 + (j as f64 + 0.5) * resolution,
                area.z(),
            );
            let field = los_field_at(layout, &cell, w, thetas, cfg, components)?;
            values[(i, j)] = field.norm_sqr();
        }
    }
    Ok(RssMap {
        x_min: x0,
        y_min: y0,
        resolution,
        values,
    })
}
