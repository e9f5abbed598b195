//! Station layout, target kinematics and the mapping from the target state to
//! the bistatic delays, Doppler shifts and path lengths.
//!
//! Path index convention: the path from transmitter `m` to receiver `n`
//! (both zero-based) has index `c = n * M + m`. Every per-path vector and
//! every column group in this crate uses that order.

use nalgebra::{DMatrix, DVector, Point2};

use crate::error::{Error, Result, Station};
use crate::scalar::{lit, Real, SPEED_OF_LIGHT};

/// Distance below which a station is treated as colocated with the target.
pub const COLOCATION_RADIUS_M: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct StationLayout<T: Real> {
    tx: Vec<Point2<T>>,
    rx: Vec<Point2<T>>,
}

impl<T: Real> StationLayout<T> {
    pub fn new(tx: Vec<Point2<T>>, rx: Vec<Point2<T>>) -> Result<Self> {
        if tx.is_empty() {
            return Err(Error::invalid("station layout", "at least one transmitter is required"));
        }
        if rx.is_empty() {
            return Err(Error::invalid("station layout", "at least one receiver is required"));
        }
        let finite = |p: &Point2<T>| p.x.is_finite() && p.y.is_finite();
        if !tx.iter().chain(rx.iter()).all(finite) {
            return Err(Error::invalid("station layout", "station coordinates must be finite"));
        }
        Ok(StationLayout { tx, rx })
    }

    /// Stations on a circle of `radius` around `reference`; transmitter `m`
    /// sits at angle `2*pi*m/M`, receiver `n` at `2*pi*n/N` (zero-based).
    pub fn ring(reference: Point2<T>, radius: T, num_tx: usize, num_rx: usize) -> Result<Self> {
        let place = |i: usize, total: usize| {
            let angle = T::two_pi() * lit::<T>(i as f64) / lit::<T>(total as f64);
            Point2::new(reference.x + radius * angle.cos(), reference.y + radius * angle.sin())
        };
        let tx = (0..num_tx).map(|m| place(m, num_tx)).collect();
        let rx = (0..num_rx).map(|n| place(n, num_rx)).collect();
        Self::new(tx, rx)
    }

    pub fn transmitters(&self) -> &[Point2<T>] {
        &self.tx
    }

    pub fn receivers(&self) -> &[Point2<T>] {
        &self.rx
    }

    pub fn num_tx(&self) -> usize {
        self.tx.len()
    }

    pub fn num_rx(&self) -> usize {
        self.rx.len()
    }

    pub fn num_paths(&self) -> usize {
        self.tx.len() * self.rx.len()
    }

    /// Length of the intermediate parameter vector, `2NM + M + N`.
    pub fn num_intermediate(&self) -> usize {
        2 * self.num_paths() + self.num_tx() + self.num_rx()
    }

    #[inline]
    pub fn path_index(&self, rx: usize, tx: usize) -> usize {
        rx * self.tx.len() + tx
    }

    /// `(receiver, transmitter)` of a path index.
    #[inline]
    pub fn path_stations(&self, path: usize) -> (usize, usize) {
        (path / self.tx.len(), path % self.tx.len())
    }

    /// Euclidean distances between every pair of receivers.
    pub fn receiver_distances(&self) -> DMatrix<T> {
        let n = self.rx.len();
        DMatrix::from_fn(n, n, |i, j| (self.rx[i] - self.rx[j]).norm())
    }

    pub(crate) fn check_clearance(&self, position: &Point2<T>) -> Result<()> {
        let radius = lit::<T>(COLOCATION_RADIUS_M);
        let stations = self
            .tx
            .iter()
            .enumerate()
            .map(|(m, p)| (Station::Transmitter(m), p))
            .chain(self.rx.iter().enumerate().map(|(n, p)| (Station::Receiver(n), p)));
        for (station, p) in stations {
            let d = (p - position).norm();
            if !(d > radius) {
                return Err(Error::Colocated {
                    station,
                    distance_m: crate::scalar::to_f64(d),
                });
            }
        }
        Ok(())
    }
}

/// Target position (m) and velocity (m/s).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetState<T: Real> {
    pub x: T,
    pub y: T,
    pub vx: T,
    pub vy: T,
}

impl<T: Real> TargetState<T> {
    pub fn new(x: T, y: T, vx: T, vy: T) -> Self {
        TargetState { x, y, vx, vy }
    }

    pub fn position(&self) -> Point2<T> {
        Point2::new(self.x, self.y)
    }

    pub fn to_array(&self) -> [T; 4] {
        [self.x, self.y, self.vx, self.vy]
    }

    pub fn from_array(a: [T; 4]) -> Self {
        TargetState::new(a[0], a[1], a[2], a[3])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Delays (s), Doppler shifts (Hz) and path lengths (m) through which the
/// target state enters the observation model.
#[derive(Debug, Clone, PartialEq)]
pub struct IntermediateParams<T: Real> {
    pub tau: Vec<T>,
    pub doppler: Vec<T>,
    pub dist_tx: Vec<T>,
    pub dist_rx: Vec<T>,
}

impl<T: Real> IntermediateParams<T> {
    pub fn len(&self) -> usize {
        self.tau.len() + self.doppler.len() + self.dist_tx.len() + self.dist_rx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stacked `[tau; f; d_t; d_r]`.
    pub fn to_vector(&self) -> DVector<T> {
        DVector::from_iterator(
            self.len(),
            self.tau
                .iter()
                .chain(&self.doppler)
                .chain(&self.dist_tx)
                .chain(&self.dist_rx)
                .copied(),
        )
    }

    pub fn from_vector(v: &DVector<T>, num_tx: usize, num_rx: usize) -> Result<Self> {
        let paths = num_tx * num_rx;
        let expected = 2 * paths + num_tx + num_rx;
        if v.len() != expected {
            return Err(Error::Dimension {
                context: "intermediate parameter vector",
                expected: expected.to_string(),
                got: v.len().to_string(),
            });
        }
        let s = v.as_slice();
        Ok(IntermediateParams {
            tau: s[..paths].to_vec(),
            doppler: s[paths..2 * paths].to_vec(),
            dist_tx: s[2 * paths..2 * paths + num_tx].to_vec(),
            dist_rx: s[2 * paths + num_tx..].to_vec(),
        })
    }
}

struct PathTerms<T> {
    dist: T,
    dx: T,
    dy: T,
}

fn offsets<T: Real>(station: &Point2<T>, target: &TargetState<T>) -> PathTerms<T> {
    let dx = station.x - target.x;
    let dy = station.y - target.y;
    PathTerms {
        dist: (dx * dx + dy * dy).sqrt(),
        dx,
        dy,
    }
}

/// Delays, Doppler shifts and distances for every transmit/receive path.
pub fn intermediate_params<T: Real>(
    layout: &StationLayout<T>,
    target: &TargetState<T>,
    wavelength: T,
) -> Result<IntermediateParams<T>> {
    layout.check_clearance(&target.position())?;
    let c = lit::<T>(SPEED_OF_LIGHT);
    let tx: Vec<_> = layout.tx.iter().map(|p| offsets(p, target)).collect();
    let rx: Vec<_> = layout.rx.iter().map(|p| offsets(p, target)).collect();

    let paths = layout.num_paths();
    let mut tau = Vec::with_capacity(paths);
    let mut doppler = Vec::with_capacity(paths);
    for r in &rx {
        for t in &tx {
            tau.push((t.dist + r.dist) / c);
            let radial_t = (target.vx * t.dx + target.vy * t.dy) / (wavelength * t.dist);
            let radial_r = (target.vx * r.dx + target.vy * r.dy) / (wavelength * r.dist);
            doppler.push(radial_t + radial_r);
        }
    }
    Ok(IntermediateParams {
        tau,
        doppler,
        dist_tx: tx.iter().map(|t| t.dist).collect(),
        dist_rx: rx.iter().map(|r| r.dist).collect(),
    })
}

/// Partial derivatives of the intermediate parameters with respect to the
/// target state. Each block has two rows (x, y) or (vx, vy).
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianBlocks<T: Real> {
    /// d tau / d(x, y), 2 x NM.
    pub delay_pos: DMatrix<T>,
    /// d f / d(x, y), 2 x NM.
    pub doppler_pos: DMatrix<T>,
    /// d f / d(vx, vy), 2 x NM.
    pub doppler_vel: DMatrix<T>,
    /// d d_t / d(x, y), 2 x M.
    pub dist_tx: DMatrix<T>,
    /// d d_r / d(x, y), 2 x N.
    pub dist_rx: DMatrix<T>,
}

impl<T: Real> JacobianBlocks<T> {
    pub fn num_paths(&self) -> usize {
        self.delay_pos.ncols()
    }

    /// The full 4 x (2NM+M+N) matrix `grad_theta(vartheta^T)`:
    ///
    /// ```text
    /// [ F  G  Dt  Dr ]
    /// [ 0  H  0   0  ]
    /// ```
    pub fn assembled(&self) -> DMatrix<T> {
        let paths = self.num_paths();
        let m = self.dist_tx.ncols();
        let n = self.dist_rx.ncols();
        let mut out = DMatrix::zeros(4, 2 * paths + m + n);
        out.view_mut((0, 0), (2, paths)).copy_from(&self.delay_pos);
        out.view_mut((0, paths), (2, paths)).copy_from(&self.doppler_pos);
        out.view_mut((2, paths), (2, paths)).copy_from(&self.doppler_vel);
        out.view_mut((0, 2 * paths), (2, m)).copy_from(&self.dist_tx);
        out.view_mut((0, 2 * paths + m), (2, n)).copy_from(&self.dist_rx);
        out
    }
}

/// Analytic Jacobian of the delays, Doppler shifts and distances.
pub fn jacobian<T: Real>(
    layout: &StationLayout<T>,
    target: &TargetState<T>,
    wavelength: T,
) -> Result<JacobianBlocks<T>> {
    layout.check_clearance(&target.position())?;
    let c = lit::<T>(SPEED_OF_LIGHT);
    let (vx, vy) = (target.vx, target.vy);
    let tx: Vec<_> = layout.tx.iter().map(|p| offsets(p, target)).collect();
    let rx: Vec<_> = layout.rx.iter().map(|p| offsets(p, target)).collect();

    let paths = layout.num_paths();
    let mut delay_pos = DMatrix::zeros(2, paths);
    let mut doppler_pos = DMatrix::zeros(2, paths);
    let mut doppler_vel = DMatrix::zeros(2, paths);

    for (n, r) in rx.iter().enumerate() {
        for (m, t) in tx.iter().enumerate() {
            let col = layout.path_index(n, m);
            // offsets are station minus target, so (x - x_station) = -dx
            delay_pos[(0, col)] = -(t.dx / t.dist + r.dx / r.dist) / c;
            delay_pos[(1, col)] = -(t.dy / t.dist + r.dy / r.dist) / c;

            let inv_sum = T::one() / t.dist + T::one() / r.dist;
            let proj_t = vx * t.dx + vy * t.dy;
            let proj_r = vx * r.dx + vy * r.dy;
            let cube_t = wavelength * t.dist * t.dist * t.dist;
            let cube_r = wavelength * r.dist * r.dist * r.dist;
            doppler_pos[(0, col)] =
                -vx / wavelength * inv_sum + t.dx * proj_t / cube_t + r.dx * proj_r / cube_r;
            doppler_pos[(1, col)] =
                -vy / wavelength * inv_sum + t.dy * proj_t / cube_t + r.dy * proj_r / cube_r;

            doppler_vel[(0, col)] = t.dx / (wavelength * t.dist) + r.dx / (wavelength * r.dist);
            doppler_vel[(1, col)] = t.dy / (wavelength * t.dist) + r.dy / (wavelength * r.dist);
        }
    }

    let dist_tx = DMatrix::from_fn(2, tx.len(), |i, m| {
        let t = &tx[m];
        -(if i == 0 { t.dx } else { t.dy }) / t.dist
    });
    let dist_rx = DMatrix::from_fn(2, rx.len(), |i, n| {
        let r = &rx[n];
        -(if i == 0 { r.dx } else { r.dy }) / r.dist
    });

    Ok(JacobianBlocks {
        delay_pos,
        doppler_pos,
        doppler_vel,
        dist_tx,
        dist_rx,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn monostatic() -> StationLayout<f64> {
        let p = Point2::new(22_000.0, 10_000.0);
        StationLayout::new(vec![p], vec![p]).unwrap()
    }

    #[test]
    fn monostatic_static_target() {
        let target = TargetState::new(15_000.0, 10_000.0, 0.0, 0.0);
        let ip = intermediate_params(&monostatic(), &target, 1.0 / 3.0).unwrap();
        assert_eq!(ip.dist_tx, vec![7000.0]);
        assert_eq!(ip.dist_rx, vec![7000.0]);
        assert!((ip.tau[0] - 14_000.0 / SPEED_OF_LIGHT).abs() < 1e-20);
        assert!((ip.tau[0] - 4.669_897e-5).abs() < 1e-11);
        assert_eq!(ip.doppler[0], 0.0);
    }

    #[test]
    fn monostatic_receding_doppler() {
        let target = TargetState::new(15_000.0, 10_000.0, -100.0, 0.0);
        let ip = intermediate_params(&monostatic(), &target, 1.0 / 3.0).unwrap();
        assert!((ip.doppler[0] + 600.0).abs() < 1e-9, "{}", ip.doppler[0]);
    }

    #[test]
    fn monostatic_delay_gradient() {
        let target = TargetState::new(15_000.0, 10_000.0, 0.0, 0.0);
        let jac = jacobian(&monostatic(), &target, 1.0 / 3.0).unwrap();
        assert!((jac.delay_pos[(0, 0)] + 2.0 / SPEED_OF_LIGHT).abs() < 1e-22);
        assert_eq!(jac.delay_pos[(1, 0)], 0.0);
        // zero velocity: Doppler does not depend on position
        assert_eq!(jac.doppler_pos[(0, 0)], 0.0);
        assert_eq!(jac.doppler_pos[(1, 0)], 0.0);
    }

    #[test]
    fn colocation_names_station() {
        let layout = StationLayout::new(
            vec![Point2::new(0.0, 0.0)],
            vec![Point2::new(1.0, 0.0), Point2::new(5.0, 5.0)],
        )
        .unwrap();
        let target = TargetState::new(5.0, 5.0, 1.0, 0.0);
        match intermediate_params(&layout, &target, 0.3) {
            Err(Error::Colocated { station, .. }) => assert_eq!(station, Station::Receiver(1)),
            other => panic!("expected colocation error, got {other:?}"),
        }
        assert!(jacobian(&layout, &target, 0.3).is_err());
    }

    #[test]
    fn layout_validation() {
        assert!(StationLayout::<f64>::new(vec![], vec![Point2::new(0.0, 0.0)]).is_err());
        assert!(StationLayout::new(vec![Point2::new(f64::NAN, 0.0)], vec![Point2::new(0.0, 0.0)]).is_err());
    }

    #[test]
    fn ring_layout_angles() {
        let layout = StationLayout::<f64>::ring(Point2::new(15_000.0, 10_000.0), 7000.0, 2, 3).unwrap();
        let tx = layout.transmitters();
        assert!((tx[0].x - 22_000.0).abs() < 1e-9 && (tx[0].y - 10_000.0).abs() < 1e-9);
        assert!((tx[1].x - 8_000.0).abs() < 1e-9 && (tx[1].y - 10_000.0).abs() < 1e-9);
        let rx = layout.receivers();
        assert!((rx[1].x - (15_000.0 - 3500.0)).abs() < 1e-9);
        assert!((rx[1].y - (10_000.0 + 7000.0 * (3f64).sqrt() / 2.0)).abs() < 1e-9);
    }

    #[test]
    fn intermediate_vector_roundtrip() {
        let layout = StationLayout::ring(Point2::new(0.0, 0.0), 7000.0, 2, 3).unwrap();
        let target = TargetState::new(150.0, 127.5, 50.0, 30.0);
        let ip = intermediate_params(&layout, &target, 0.333).unwrap();
        assert_eq!(ip.len(), layout.num_intermediate());
        let back = IntermediateParams::from_vector(&ip.to_vector(), 2, 3).unwrap();
        assert_eq!(back, ip);
        assert!(IntermediateParams::from_vector(&DVector::<f64>::zeros(3), 2, 3).is_err());
    }

    #[test]
    fn assembled_velocity_rows_zero_outside_doppler() {
        let layout = StationLayout::ring(Point2::new(0.0, 0.0), 7000.0, 2, 3).unwrap();
        let target = TargetState::new(150.0, 127.5, 50.0, 30.0);
        let a = jacobian(&layout, &target, 0.333).unwrap().assembled();
        let paths = layout.num_paths();
        for row in 2..4 {
            for col in 0..a.ncols() {
                if !(paths..2 * paths).contains(&col) {
                    assert_eq!(a[(row, col)], 0.0);
                }
            }
        }
    }

    #[test]
    fn single_precision_agrees_with_double() {
        let layout64 = StationLayout::<f64>::ring(Point2::new(15_000.0, 10_000.0), 7000.0, 2, 3).unwrap();
        let layout32 = StationLayout::ring(Point2::new(15_000.0f32, 10_000.0), 7000.0, 2, 3).unwrap();
        let t64 = TargetState::new(15_150.0, 10_127.5, 50.0, 30.0);
        let t32 = TargetState::new(15_150.0f32, 10_127.5, 50.0, 30.0);
        let a = intermediate_params(&layout64, &t64, 0.333).unwrap();
        let b = intermediate_params(&layout32, &t32, 0.333).unwrap();
        for (x, y) in a.doppler.iter().zip(&b.doppler) {
            assert!((x - *y as f64).abs() < 1e-2 * x.abs().max(1.0));
        }
    }
}
