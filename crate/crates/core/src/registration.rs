//! Point clouds, nearest-neighbour search, point-to-point ICP and the
//! overlap scores used to rank candidate relative transforms.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::geom::{Pose, Rotation};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vector3<f64>>,
    pub frame: Option<String>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("point cloud is empty"));
        }
        if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::invalid("point cloud has non-finite coordinates"));
        }
        Ok(PointCloud { points, frame: None })
    }

    pub fn with_frame(mut self, frame: impl Into<String>) -> Self {
        self.frame = Some(frame.into());
        self
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn transformed(&self, pose: &Pose) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| pose.transform_point(p)).collect(),
            frame: self.frame.clone(),
        }
    }

    /// Largest side of the axis-aligned bounding box.
    pub fn extent(&self) -> f64 {
        let mut lo = self.points[0];
        let mut hi = self.points[0];
        for p in &self.points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (hi - lo).max()
    }

    /// Median nearest-neighbour distance; 0 for single-point clouds.
    pub fn median_spacing(&self) -> f64 {
        if self.points.len() < 2 {
            return 0.0;
        }
        let tree = KdTree::build(&self.points);
        let mut d: Vec<f64> = self
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| tree.nearest_excluding(p, i).map_or(0.0, |n| n.dist2.sqrt()))
            .collect();
        let mid = d.len() / 2;
        let (_, m, _) = d.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
        *m
    }

    /// Default overlap threshold: twice the median point spacing.
    pub fn default_overlap_threshold(&self) -> f64 {
        2.0 * self.median_spacing()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist2: f64,
}

impl Neighbor {
    /// Ties on distance go to the lower index.
    fn better_than(&self, other: &Neighbor) -> bool {
        self.dist2 < other.dist2 || (self.dist2 == other.dist2 && self.index < other.index)
    }
}

/// Exhaustive nearest neighbour with the same tie rule as [`KdTree`].
pub fn nearest_brute_force(points: &[Vector3<f64>], q: &Vector3<f64>) -> Option<Neighbor> {
    let mut best: Option<Neighbor> = None;
    for (index, p) in points.iter().enumerate() {
        let cand = Neighbor {
            index,
            dist2: (p - q).norm_squared(),
        };
        if best.is_none_or(|b| cand.better_than(&b)) {
            best = Some(cand);
        }
    }
    best
}

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum KdNode {
    Leaf { start: usize, end: usize },
    Split { dim: usize, value: f64, left: usize, right: usize },
}

/// Static 3-D k-d tree with exact nearest-neighbour queries.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vector3<f64>>,
    order: Vec<usize>,
    nodes: Vec<KdNode>,
}

impl KdTree {
    pub fn build(points: &[Vector3<f64>]) -> Self {
        let mut tree = KdTree {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::with_capacity(2 * points.len() / LEAF_SIZE + 1),
        };
        if !points.is_empty() {
            tree.build_node(0, points.len());
        }
        tree
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(KdNode::Leaf { start, end });
            return id;
        }
        let (mut lo, mut hi) = (self.points[self.order[start]], self.points[self.order[start]]);
        for &i in &self.order[start..end] {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let dim = (hi - lo).imax();
        let mid = (start + end) / 2;
        let points = &self.points;
        self.order[start..end]
            .select_nth_unstable_by(mid - start, |&a, &b| points[a][dim].total_cmp(&points[b][dim]));
        let value = self.points[self.order[mid]][dim];
        self.nodes.push(KdNode::Leaf { start: 0, end: 0 });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = KdNode::Split { dim, value, left, right };
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn nearest(&self, q: &Vector3<f64>) -> Option<Neighbor> {
        self.search(q, f64::INFINITY, None)
    }

    /// Nearest neighbour with distance ≤ `radius`.
    pub fn nearest_within(&self, q: &Vector3<f64>, radius: f64) -> Option<Neighbor> {
        self.search(q, radius * radius, None)
    }

    pub fn nearest_excluding(&self, q: &Vector3<f64>, exclude: usize) -> Option<Neighbor> {
        self.search(q, f64::INFINITY, Some(exclude))
    }

    fn search(&self, q: &Vector3<f64>, max_dist2: f64, exclude: Option<usize>) -> Option<Neighbor> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best: Option<Neighbor> = None;
        let mut bound = max_dist2;
        self.visit(0, q, &mut best, &mut bound, exclude);
        best
    }

    fn visit(&self, node: usize, q: &Vector3<f64>, best: &mut Option<Neighbor>, bound: &mut f64, exclude: Option<usize>) {
        match self.nodes[node] {
            KdNode::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if Some(i) == exclude {
                        continue;
                    }
                    let cand = Neighbor {
                        index: i,
                        dist2: (self.points[i] - q).norm_squared(),
                    };
                    if cand.dist2 <= *bound && best.is_none_or(|b| cand.better_than(&b)) {
                        *bound = cand.dist2;
                        *best = Some(cand);
                    }
                }
            }
            KdNode::Split { dim, value, left, right } => {
                let diff = q[dim] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.visit(near, q, best, bound, exclude);
                // `<=` so that equal-distance points with lower indices are still found.
                if diff * diff <= *bound {
                    self.visit(far, q, best, bound, exclude);
                }
            }
        }
    }
}

/// A cloud together with its search index, built once and shared read-only.
#[derive(Debug, Clone)]
pub struct IndexedCloud {
    pub cloud: PointCloud,
    pub tree: KdTree,
}

impl IndexedCloud {
    pub fn new(cloud: PointCloud) -> Self {
        let tree = KdTree::build(cloud.points());
        IndexedCloud { cloud, tree }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpConfig {
    pub max_iterations: usize,
    /// meters
    pub correspondence_cutoff: f64,
    /// meters (translation) plus radians (rotation) of the last update
    pub convergence_tol: f64,
    /// `None` selects twice the target's median point spacing.
    pub overlap_threshold: Option<f64>,
}

impl Default for IcpConfig {
    fn default() -> Self {
        IcpConfig {
            max_iterations: 60,
            correspondence_cutoff: 2.0,
            convergence_tol: 1e-10,
            overlap_threshold: None,
        }
    }
}

impl IcpConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_iterations > 0
            && self.correspondence_cutoff > 0.0
            && self.convergence_tol > 0.0
            && self.overlap_threshold.is_none_or(|t| t > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("ICP configuration values must be positive"))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    /// Maps source-frame points into the target frame.
    pub transform: Pose,
    pub rms: f64,
    pub iterations: usize,
    pub converged: bool,
    pub correspondences: usize,
    pub diagnostic: Option<String>,
}

/// Closed-form rigid transform minimizing `Σ‖R·src + t − dst‖²`.
pub fn kabsch(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Pose {
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let v = v_t.transpose();
    let mut fix = Matrix3::identity();
    fix[(2, 2)] = (v * u.transpose()).determinant().signum();
    let r = v * fix * u.transpose();
    let rotation = Rotation::from_matrix_unchecked(r).renormalized_if_needed();
    Pose::new(rotation, cd - rotation.rotate(&cs))
}

/// Point-to-point ICP of `source` onto `target` starting from `init`.
pub fn icp_align(source: &PointCloud, target: &PointCloud, init: &Pose, cfg: &IcpConfig) -> Result<IcpResult> {
    let tree = KdTree::build(target.points());
    icp_align_indexed(source, &tree, init, cfg)
}

pub fn icp_align_indexed(source: &PointCloud, target: &KdTree, init: &Pose, cfg: &IcpConfig) -> Result<IcpResult> {
    cfg.validate()?;
    if source.len() < 10 || target.len() < 10 {
        return Err(Error::invalid(format!(
            "ICP needs at least 10 points per cloud (source {}, target {})",
            source.len(),
            target.len()
        )));
    }
    let mut transform = *init;
    let mut src = Vec::with_capacity(source.len());
    let mut dst = Vec::with_capacity(source.len());
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        iterations += 1;
        correspondences(source, target, &transform, cfg.correspondence_cutoff, &mut src, &mut dst);
        if src.len() < 3 {
            return Ok(IcpResult {
                transform,
                rms: f64::INFINITY,
                iterations,
                converged: false,
                correspondences: src.len(),
                diagnostic: Some(format!(
                    "only {} correspondences within {} m at iteration {iterations}",
                    src.len(),
                    cfg.correspondence_cutoff
                )),
            });
        }
        let update = kabsch(&src, &dst);
        transform = update.compose(&transform);
        transform.rotation = transform.rotation.renormalized_if_needed();
        let step = update.translation.norm() + update.rotation.log().norm();
        if step < cfg.convergence_tol {
            converged = true;
            break;
        }
    }
    correspondences(source, target, &transform, cfg.correspondence_cutoff, &mut src, &mut dst);
    let count = src.len();
    let rms = if count == 0 {
        f64::INFINITY
    } else {
        (src.iter().zip(&dst).map(|(s, d)| (s - d).norm_squared()).sum::<f64>() / count as f64).sqrt()
    };
    let diagnostic = (!converged).then(|| format!("no convergence after {iterations} iterations"));
    Ok(IcpResult {
        transform,
        rms,
        iterations,
        converged,
        correspondences: count,
        diagnostic,
    })
}

fn correspondences(
    source: &PointCloud,
    target: &KdTree,
    transform: &Pose,
    cutoff: f64,
    src: &mut Vec<Vector3<f64>>,
    dst: &mut Vec<Vector3<f64>>,
) {
    src.clear();
    dst.clear();
    for p in source.points() {
        let q = transform.transform_point(p);
        if let Some(n) = target.nearest_within(&q, cutoff) {
            src.push(q);
            dst.push(target.points()[n.index]);
        }
    }
}

/// Fraction of `p` whose nearest neighbour in `q` lies within `tau`.
pub fn overlap_ratio(p: &PointCloud, q: &PointCloud, tau: f64) -> f64 {
    let tree = KdTree::build(q.points());
    overlap_ratio_indexed(p.points().iter().copied(), &tree, tau)
}

fn overlap_ratio_indexed(points: impl ExactSizeIterator<Item = Vector3<f64>>, tree: &KdTree, tau: f64) -> f64 {
    let n = points.len();
    if n == 0 {
        return 0.0;
    }
    let hits = points.filter(|x| tree.nearest_within(x, tau).is_some()).count();
    hits as f64 / n as f64
}

/// `0.5·[O(P_i, dT·P_next) + O(P_next, dT⁻¹·P_i)]`.
pub fn symmetric_overlap(dt: &Pose, p_i: &PointCloud, p_next: &PointCloud, tau: f64) -> f64 {
    symmetric_overlap_indexed(dt, &IndexedCloud::new(p_i.clone()), &IndexedCloud::new(p_next.clone()), tau)
}

/// [`symmetric_overlap`] on prebuilt indices. Rigid motions preserve
/// distances, so each direction queries the untransformed tree of the other
/// cloud with inversely transformed points.
pub fn symmetric_overlap_indexed(dt: &Pose, p_i: &IndexedCloud, p_next: &IndexedCloud, tau: f64) -> f64 {
    let inv = dt.inverse();
    let forward = overlap_ratio_indexed(p_i.cloud.points().iter().map(|p| inv.transform_point(p)), &p_next.tree, tau);
    let backward = overlap_ratio_indexed(p_next.cloud.points().iter().map(|p| dt.transform_point(p)), &p_i.tree, tau);
    0.5 * (forward + backward)
}

fn parse_f64(tok: &str, source: &str, line: usize) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| Error::parse(source, line, format!("`{tok}` is not a number")))?;
    if !v.is_finite() {
        return Err(Error::parse(source, line, format!("non-finite coordinate `{tok}`")));
    }
    Ok(v)
}

/// One `x y z` triple per line; blank lines and `#` comments are skipped.
pub fn parse_xyz(text: &str, source: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(Error::parse(source, i + 1, format!("expected 3 coordinates, found {}", toks.len())));
        }
        points.push(Vector3::new(
            parse_f64(toks[0], source, i + 1)?,
            parse_f64(toks[1], source, i + 1)?,
            parse_f64(toks[2], source, i + 1)?,
        ));
    }
    PointCloud::new(points).map_err(|e| Error::parse(source, 0, e.to_string()))
}

/// ASCII PLY; the vertex element must carry `x`, `y`, `z` properties.
pub fn parse_ply(text: &str, source: &str) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(Error::parse(source, 1, "missing `ply` magic")),
    }
    let mut vertex_count = None;
    let mut in_vertex = false;
    let mut props: Vec<String> = Vec::new();
    let mut header_end = None;
    for (i, line) in lines.by_ref() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", fmt, ..] => {
                if *fmt != "ascii" {
                    return Err(Error::parse(source, i + 1, format!("unsupported PLY format `{fmt}`")));
                }
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                in_vertex = *name == "vertex";
                if in_vertex {
                    vertex_count = Some(
                        count
                            .parse::<usize>()
                            .map_err(|_| Error::parse(source, i + 1, "bad vertex count"))?,
                    );
                }
            }
            ["property", "list", ..] => {
                if in_vertex {
                    return Err(Error::parse(source, i + 1, "list properties on vertices are not supported"));
                }
            }
            ["property", _ty, name] => {
                if in_vertex {
                    props.push(name.to_string());
                }
            }
            ["end_header"] => {
                header_end = Some(i + 1);
                break;
            }
            _ => return Err(Error::parse(source, i + 1, format!("unexpected header line `{line}`"))),
        }
    }
    let header_end = header_end.ok_or_else(|| Error::parse(source, 0, "missing end_header"))?;
    let count = vertex_count.ok_or_else(|| Error::parse(source, header_end, "no vertex element"))?;
    let col = |name: &str| {
        props
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| Error::parse(source, header_end, format!("vertex element lacks `{name}`")))
    };
    let (cx, cy, cz) = (col("x")?, col("y")?, col("z")?);
    let mut points = Vec::with_capacity(count);
    for (i, line) in lines {
        if points.len() == count {
            break;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != props.len() {
            return Err(Error::parse(
                source,
                i + 1,
                format!("expected {} values, found {}", props.len(), toks.len()),
            ));
        }
        points.push(Vector3::new(
            parse_f64(toks[cx], source, i + 1)?,
            parse_f64(toks[cy], source, i + 1)?,
            parse_f64(toks[cz], source, i + 1)?,
        ));
    }
    if points.len() != count {
        return Err(Error::parse(source, 0, format!("expected {count} vertices, found {}", points.len())));
    }
    PointCloud::new(points).map_err(|e| Error::parse(source, 0, e.to_string()))
}

/// Reads `.ply` files as PLY and everything else as XYZ.
pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    let text = std::fs::read_to_string(path)?;
    let name = path.display().to_string();
    let is_ply = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ply"));
    if is_ply {
        parse_ply(&text, &name)
    } else {
        parse_xyz(&text, &name)
    }
}

pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 40);
    for p in cloud.points() {
        out.push_str(&format!("{:?} {:?} {:?}\n", p.x, p.y, p.z));
    }
    out
}

pub fn write_xyz(path: &Path, cloud: &PointCloud) -> Result<()> {
    std::fs::write(path, format_xyz(cloud))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::exp_so3;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Height field with bumps at asymmetric positions.
    fn surface(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        let pts = (0..n)
            .map(|_| {
                let x: f64 = rng.random_range(-1.0..1.0);
                let y: f64 = rng.random_range(-1.0..1.0);
                let z = 0.3 * (-((x - 0.4).powi(2) + (y + 0.2).powi(2)) * 8.0).exp()
                    - 0.2 * (-((x + 0.5).powi(2) + (y - 0.5).powi(2)) * 12.0).exp()
                    + 0.1 * x * y
                    + 0.05 * x;
                Vector3::new(x, y, z)
            })
            .collect();
        PointCloud::new(pts).unwrap()
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| Vector3::from_fn(|_, _| rng.random_range(-scale..scale)))
            .collect()
    }

    #[test]
    fn kd_tree_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [1, 2, 9, 50, 500] {
            let pts = random_points(&mut rng, n, 1.0);
            let tree = KdTree::build(&pts);
            for q in random_points(&mut rng, 200, 1.5) {
                assert_eq!(tree.nearest(&q), nearest_brute_force(&pts, &q));
            }
        }
    }

    #[test]
    fn kd_tree_breaks_ties_by_index() {
        // Grid points give many equidistant neighbours.
        let mut pts = Vec::new();
        for i in 0..6 {
            for j in 0..6 {
                for k in 0..6 {
                    pts.push(Vector3::new(i as f64, j as f64, k as f64));
                }
            }
        }
        pts.reverse();
        let tree = KdTree::build(&pts);
        for i in 0..5 {
            for j in 0..5 {
                let q = Vector3::new(i as f64 + 0.5, j as f64 + 0.5, 2.5);
                assert_eq!(tree.nearest(&q), nearest_brute_force(&pts, &q));
            }
        }
    }

    #[test]
    fn nearest_within_respects_radius() {
        let pts = vec![Vector3::zeros(), Vector3::new(2.0, 0.0, 0.0)];
        let tree = KdTree::build(&pts);
        assert!(tree.nearest_within(&Vector3::new(0.9, 0.0, 0.0), 0.5).is_none());
        assert_eq!(tree.nearest_within(&Vector3::new(0.9, 0.0, 0.0), 1.0).unwrap().index, 0);
        assert_eq!(tree.nearest_excluding(&Vector3::zeros(), 0).unwrap().index, 1);
    }

    #[test]
    fn icp_identical_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = surface(&mut rng, 500);
        let r = icp_align(&c, &c, &Pose::identity(), &IcpConfig::default()).unwrap();
        assert!(r.converged);
        assert!(r.rms <= 1e-9);
        assert!((r.transform.to_homogeneous() - nalgebra::Matrix4::identity()).amax() <= 1e-9);
    }

    #[test]
    fn icp_recovers_known_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let source = surface(&mut rng, 2000);
        let truth = Pose::new(
            exp_so3(&Vector3::new(0.0, 0.0, 5f64.to_radians())),
            Vector3::new(0.1, 0.0, 0.0),
        );
        let target = source.transformed(&truth);
        let r = icp_align(&source, &target, &Pose::identity(), &IcpConfig::default()).unwrap();
        assert!(r.converged, "{:?}", r.diagnostic);
        assert!((r.transform.translation - truth.translation).norm() < 1e-3);
        assert!(r.transform.rotation.angle_to(&truth.rotation) < 1e-3);
    }

    #[test]
    fn icp_disjoint_clouds_do_not_converge() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = surface(&mut rng, 100);
        let b = a.transformed(&Pose::from_translation(Vector3::new(100.0, 0.0, 0.0)));
        let r = icp_align(&a, &b, &Pose::identity(), &IcpConfig::default()).unwrap();
        assert!(!r.converged);
        assert!(r.diagnostic.is_some());
        let tiny = PointCloud::new(random_points(&mut rng, 5, 1.0)).unwrap();
        assert!(icp_align(&tiny, &a, &Pose::identity(), &IcpConfig::default()).is_err());
    }

    #[test]
    fn kabsch_exact_for_noiseless_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let src = random_points(&mut rng, 20, 3.0);
        let t = Pose::new(exp_so3(&Vector3::new(0.3, -1.2, 2.0)), Vector3::new(1.0, 2.0, -3.0));
        let dst: Vec<_> = src.iter().map(|p| t.transform_point(p)).collect();
        let est = kabsch(&src, &dst);
        assert_relative_eq!(est.to_homogeneous(), t.to_homogeneous(), epsilon = 1e-12);
    }

    #[test]
    fn overlap_basic_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = surface(&mut rng, 300);
        assert_eq!(overlap_ratio(&p, &p, 0.01), 1.0);
        let far = p.transformed(&Pose::from_translation(Vector3::new(0.0, 0.0, 10.0)));
        assert_eq!(overlap_ratio(&p, &far, 0.5), 0.0);
        assert_eq!(symmetric_overlap(&Pose::identity(), &p, &p, 0.01), 1.0);
    }

    #[test]
    fn overlap_half_cloud() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts = random_points(&mut rng, 400, 1.0);
        let p = PointCloud::new(pts.clone()).unwrap();
        // Q keeps the first half of P and moves the rest far away.
        let q: Vec<_> = pts
            .iter()
            .enumerate()
            .map(|(i, x)| if i < 200 { *x } else { x + Vector3::new(50.0, 0.0, 0.0) })
            .collect();
        let q = PointCloud::new(q).unwrap();
        let tau = 1e-6;
        let brute = p
            .points()
            .iter()
            .filter(|x| nearest_brute_force(q.points(), x).unwrap().dist2.sqrt() <= tau)
            .count() as f64
            / p.len() as f64;
        let ratio = overlap_ratio(&p, &q, tau);
        assert_eq!(ratio, brute);
        assert!((ratio - 0.5).abs() <= 1.0 / p.len() as f64);
    }

    #[test]
    fn overlap_monotone_in_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = PointCloud::new(random_points(&mut rng, 200, 1.0)).unwrap();
        let q = PointCloud::new(random_points(&mut rng, 200, 1.0)).unwrap();
        let mut prev = 1.0;
        for tau in [1.0, 0.5, 0.2, 0.1, 0.05, 0.01] {
            let r = overlap_ratio(&p, &q, tau);
            assert!(r <= prev);
            prev = r;
        }
    }

    #[test]
    fn symmetric_overlap_is_mean_of_directed_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = PointCloud::new(random_points(&mut rng, 150, 1.0)).unwrap();
        let b = PointCloud::new(random_points(&mut rng, 120, 1.0)).unwrap();
        let dt = Pose::new(exp_so3(&Vector3::new(0.1, 0.0, 0.2)), Vector3::new(0.05, 0.0, 0.0));
        let tau = 0.15;
        let oracle = 0.5 * (overlap_ratio(&a, &b.transformed(&dt), tau) + overlap_ratio(&b, &a.transformed(&dt.inverse()), tau));
        assert_relative_eq!(symmetric_overlap(&dt, &a, &b, tau), oracle, epsilon = 1e-15);
    }

    #[test]
    fn true_motion_scores_higher_than_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let scene = surface(&mut rng, 1500);
        let motion = Pose::new(exp_so3(&Vector3::new(0.0, 0.0, 0.2)), Vector3::new(0.3, 0.1, 0.0));
        // Scan i sees the scene in its own frame; scan i+1 from the moved sensor.
        let p_next = scene.transformed(&motion.inverse());
        let tau = scene.default_overlap_threshold();
        let s_true = symmetric_overlap(&motion, &scene, &p_next, tau);
        let s_id = symmetric_overlap(&Pose::identity(), &scene, &p_next, tau);
        assert!(s_true > s_id, "{s_true} vs {s_id}");
        assert_eq!(s_true, 1.0);
    }

    #[test]
    fn xyz_parsing() {
        let c = parse_xyz("# header\n1 2 3\n\n4.5 -6 7e-1\n", "a.xyz").unwrap();
        assert_eq!(c.points()[1], Vector3::new(4.5, -6.0, 0.7));
        let err = parse_xyz("1 2 3\n4 x 6\n", "b.xyz").unwrap_err();
        assert!(err.to_string().contains("b.xyz:2"), "{err}");
        assert!(parse_xyz("1 2\n", "c.xyz").unwrap_err().to_string().contains(":1"));
        let back = parse_xyz(&format_xyz(&c), "d").unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn ply_parsing() {
        let text = "ply\nformat ascii 1.0\ncomment made up\nelement vertex 2\nproperty float intensity\nproperty float x\nproperty float y\nproperty float z\nelement face 0\nproperty list uchar int vertex_indices\nend_header\n9 1 2 3\n9 4 5 6\n";
        let c = parse_ply(text, "a.ply").unwrap();
        assert_eq!(c.points(), &[Vector3::new(1.0, 2.0, 3.0), Vector3::new(4.0, 5.0, 6.0)]);
        let bad = text.replace("9 4 5 6", "9 4 five 6");
        assert!(parse_ply(&bad, "b.ply").unwrap_err().to_string().contains("b.ply:13"));
        assert!(parse_ply("ply\nformat binary_little_endian 1.0\nend_header\n", "c.ply").is_err());
        let noz = text.replace("property float z\n", "");
        assert!(parse_ply(&noz, "d.ply").is_err());
    }
}
