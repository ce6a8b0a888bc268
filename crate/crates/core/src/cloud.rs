//! Point clouds, scan sets, flow fields and a dense table keyed by ordered scan pairs.

use crate::{Error, Real, Result, Vec3};

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud<T> {
    pub points: Vec<Vec3<T>>,
    pub scan_id: usize,
}

impl<T: Real> PointCloud<T> {
    pub fn new(points: Vec<Vec3<T>>, scan_id: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("point cloud"));
        }
        Ok(PointCloud { points, scan_id })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vec3<T> {
        let sum = self.points.iter().fold(Vec3::zero(), |acc, &p| acc + p);
        sum * (T::one() / T::from_count(self.len()))
    }

    /// Largest pairwise distance.
    pub fn diameter(&self) -> T {
        let mut best = T::zero();
        for (i, &p) in self.points.iter().enumerate() {
            for &q in &self.points[i + 1..] {
                best = best.max((p - q).norm_squared());
            }
        }
        best.sqrt()
    }
}

/// `K ≥ 2` clouds sharing the same point count.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanSet<T> {
    clouds: Vec<PointCloud<T>>,
}

impl<T: Real> ScanSet<T> {
    pub fn new(clouds: Vec<PointCloud<T>>) -> Result<Self> {
        if clouds.len() < 2 {
            return Err(Error::ShapeMismatch(format!(
                "need at least 2 scans, got {}",
                clouds.len()
            )));
        }
        let n = clouds[0].len();
        for (k, c) in clouds.iter().enumerate() {
            if c.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "scan {k} has {} points, scan 0 has {n}",
                    c.len()
                )));
            }
        }
        let clouds = clouds
            .into_iter()
            .enumerate()
            .map(|(k, mut c)| {
                c.scan_id = k;
                c
            })
            .collect();
        Ok(ScanSet { clouds })
    }

    pub fn from_points(points: Vec<Vec<Vec3<T>>>) -> Result<Self> {
        let clouds = points
            .into_iter()
            .enumerate()
            .map(|(k, p)| PointCloud::new(p, k))
            .collect::<Result<Vec<_>>>()?;
        Self::new(clouds)
    }

    pub fn num_scans(&self) -> usize {
        self.clouds.len()
    }

    pub fn num_points(&self) -> usize {
        self.clouds[0].len()
    }

    pub fn clouds(&self) -> &[PointCloud<T>] {
        &self.clouds
    }

    pub fn cloud(&self, k: usize) -> &PointCloud<T> {
        &self.clouds[k]
    }

    /// Largest per-scan diameter.
    pub fn diameter(&self) -> T {
        self.clouds.iter().map(|c| c.diameter()).fold(T::zero(), T::max)
    }

    /// Ordered pairs `(k, l)`, `k ≠ l`, in row-major order.
    pub fn ordered_pairs(&self) -> impl Iterator<Item = (usize, usize)> {
        ordered_pairs(self.num_scans())
    }
}

pub fn ordered_pairs(k: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..k).flat_map(move |a| (0..k).filter(move |&b| b != a).map(move |b| (a, b)))
}

pub fn unordered_pairs(k: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..k).flat_map(move |a| ((a + 1)..k).map(move |b| (a, b)))
}

/// Per-point displacement from scan `source` towards scan `target`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField<T> {
    pub source: usize,
    pub target: usize,
    pub vectors: Vec<Vec3<T>>,
}

impl<T: Real> FlowField<T> {
    pub fn new(source: usize, target: usize, vectors: Vec<Vec3<T>>) -> Result<Self> {
        if source == target {
            return Err(Error::ShapeMismatch(format!("flow from scan {source} to itself")));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("flow field"));
        }
        Ok(FlowField {
            source,
            target,
            vectors,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Mean end-point error against `other`.
    pub fn epe(&self, other: &Self) -> T {
        let sum: T = self
            .vectors
            .iter()
            .zip(&other.vectors)
            .map(|(&a, &b)| (a - b).norm())
            .sum();
        sum / T::from_count(self.len().max(1))
    }
}

/// Dense `K × K` table of optional values keyed by ordered scan pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct PairTable<V> {
    k: usize,
    slots: Vec<Option<V>>,
}

impl<V> PairTable<V> {
    pub fn new(k: usize) -> Self {
        PairTable {
            k,
            slots: (0..k * k).map(|_| None).collect(),
        }
    }

    pub fn num_scans(&self) -> usize {
        self.k
    }

    pub fn insert(&mut self, k: usize, l: usize, v: V) {
        let i = self.slot(k, l);
        self.slots[i] = Some(v);
    }

    pub fn get(&self, k: usize, l: usize) -> Option<&V> {
        self.slots[self.slot(k, l)].as_ref()
    }

    pub fn get_mut(&mut self, k: usize, l: usize) -> Option<&mut V> {
        let i = self.slot(k, l);
        self.slots[i].as_mut()
    }

    pub fn remove(&mut self, k: usize, l: usize) -> Option<V> {
        let i = self.slot(k, l);
        self.slots[i].take()
    }

    pub fn require(&self, k: usize, l: usize) -> Result<&V> {
        self.get(k, l).ok_or(Error::MissingPair(k, l))
    }

    pub fn contains(&self, k: usize, l: usize) -> bool {
        self.get(k, l).is_some()
    }

    /// Entries in row-major pair order.
    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), &V)> {
        let k = self.k;
        self.slots
            .iter()
            .enumerate()
            .filter_map(move |(i, v)| v.as_ref().map(|v| ((i / k, i % k), v)))
    }

    pub fn map<W>(&self, mut f: impl FnMut(usize, usize, &V) -> W) -> PairTable<W> {
        let mut out = PairTable::new(self.k);
        for ((a, b), v) in self.iter() {
            out.insert(a, b, f(a, b, v));
        }
        out
    }

    fn slot(&self, k: usize, l: usize) -> usize {
        assert!(k < self.k && l < self.k, "pair ({k}, {l}) out of range for {} scans", self.k);
        k * self.k + l
    }
}

/// True when the graph on `k` vertices with the given edges is connected.
pub fn is_connected(k: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> bool {
    let mut parent: Vec<usize> = (0..k).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for (a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    (0..k).all(|x| find(&mut parent, x) == find(&mut parent, 0))
}
