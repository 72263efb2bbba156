//! Bit-exact checkpoint serialization (DSCK format), trunk-parameter
//! selection/flattening, and drift-matrix assembly.
//!
//! File layout (little-endian): magic "DSCK", u32 version=1, u64 step,
//! u32 tensor-count; per tensor: u32 name-length, UTF-8 name, u32 rank,
//! u64 dims[rank]; then the raw f32 payloads concatenated after the full
//! header block, in header order. No compression, no padding.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::norm;

const MAGIC: &[u8; 4] = b"DSCK";
const VERSION: u32 = 1;

/// A named f32 tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    pub shape: Vec<u64>,
    pub data: Vec<f32>,
}

impl TensorData {
    pub fn new(shape: Vec<u64>, data: Vec<f32>) -> Self {
        TensorData { shape, data }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product::<u64>() as usize
    }
}

/// All parameters of the model at one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    /// name -> tensor; the map keeps tensors in lexicographic name order,
    /// which is also the flattening and on-disk order.
    pub tensors: BTreeMap<String, TensorData>,
}

impl Checkpoint {
    pub fn new(step: u64) -> Self {
        Checkpoint {
            step,
            tensors: BTreeMap::new(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.tensors.is_empty() {
            return Err(Error::NoTensors);
        }
        for (name, t) in &self.tensors {
            if t.numel() != t.data.len() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    shape: t.shape.clone(),
                    len: t.data.len(),
                });
            }
        }
        Ok(())
    }
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.validate()?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&ckpt.step.to_le_bytes())?;
    w.write_all(&(ckpt.tensors.len() as u32).to_le_bytes())?;
    for (name, t) in &ckpt.tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for d in &t.shape {
            w.write_all(&d.to_le_bytes())?;
        }
    }
    for t in ckpt.tensors.values() {
        for x in &t.data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bad = |reason: &str| Error::BadCheckpoint {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let step = read_u64(&mut r)?;
    let count = read_u32(&mut r)? as usize;
    if count == 0 {
        return Err(Error::NoTensors);
    }
    let mut headers = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes).map_err(|_| bad("tensor name not UTF-8"))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)?);
        }
        headers.push((name, shape));
    }
    let mut ckpt = Checkpoint::new(step);
    for (name, shape) in headers {
        let n = shape.iter().product::<u64>() as usize;
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if ckpt
            .tensors
            .insert(name.clone(), TensorData::new(shape, data))
            .is_some()
        {
            return Err(bad(&format!("duplicate tensor name {name}")));
        }
    }
    Ok(ckpt)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Selects the subset of tensors that enter geometric analysis. The trunk
/// selector keeps attention QKV/output and MLP up/down weight matrices and
/// excludes embeddings, positional parameters, layer norms and the LM head.
#[derive(Debug, Clone)]
pub struct TrunkSelector {
    /// Substrings; a tensor is selected if its name contains any of them.
    pub include: Vec<String>,
    /// If set, restrict to tensors of this block index.
    pub block: Option<usize>,
}

const TRUNK_PATTERNS: [&str; 6] = [
    ".attn.wq",
    ".attn.wk",
    ".attn.wv",
    ".attn.wo",
    ".mlp.w_in",
    ".mlp.w_out",
];

impl TrunkSelector {
    /// All trunk weights across every block.
    pub fn trunk() -> Self {
        TrunkSelector {
            include: TRUNK_PATTERNS.iter().map(|s| s.to_string()).collect(),
            block: None,
        }
    }

    /// Trunk weights of a single block.
    pub fn block(idx: usize) -> Self {
        TrunkSelector {
            block: Some(idx),
            ..Self::trunk()
        }
    }

    /// Extracts the block index from a tensor name like "block003.attn.wq".
    pub fn block_index(name: &str) -> Option<usize> {
        let rest = name.strip_prefix("block")?;
        let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
        digits.parse().ok()
    }

    pub fn matches(&self, name: &str) -> bool {
        if let Some(b) = self.block {
            if Self::block_index(name) != Some(b) {
                return false;
            }
        }
        self.include.iter().any(|p| name.contains(p))
    }

    /// Names selected from a checkpoint, in lexicographic (flattening) order.
    pub fn select<'a>(&self, ckpt: &'a Checkpoint) -> Vec<&'a str> {
        ckpt.tensors
            .keys()
            .filter(|n| self.matches(n))
            .map(|n| n.as_str())
            .collect()
    }
}

/// Concatenates the selected tensors in lexicographic name order, widened
/// to f64.
pub fn flatten_trunk(ckpt: &Checkpoint, sel: &TrunkSelector) -> Result<Vec<f64>> {
    let names = sel.select(ckpt);
    if names.is_empty() {
        return Err(Error::EmptySelection);
    }
    let total: usize = names.iter().map(|n| ckpt.tensors[*n].data.len()).sum();
    let mut out = Vec::with_capacity(total);
    for name in names {
        out.extend(ckpt.tensors[name].data.iter().map(|&x| x as f64));
    }
    Ok(out)
}

/// T x D matrix of parameter displacements from an anchor checkpoint; one
/// row per non-anchor checkpoint, rows ordered by step.
#[derive(Debug, Clone)]
pub struct DriftMatrix {
    pub anchor_step: u64,
    pub steps: Vec<u64>,
    pub rows: Vec<Vec<f64>>,
    pub row_normalized: bool,
}

impl DriftMatrix {
    pub fn t(&self) -> usize {
        self.rows.len()
    }

    pub fn d(&self) -> usize {
        self.rows.first().map_or(0, |r| r.len())
    }
}

/// Builds the drift matrix anchored at `anchor`: row t = flatten(theta(t))
/// - flatten(theta(anchor)), anchor row excluded, rows in step order. The
/// anchor is always explicit; different analyses anchor at different steps.
pub fn build_drift_matrix(
    ckpts: &[&Checkpoint],
    anchor: u64,
    sel: &TrunkSelector,
    row_normalize: bool,
) -> Result<DriftMatrix> {
    let anchor_ckpt = ckpts
        .iter()
        .find(|c| c.step == anchor)
        .ok_or(Error::AnchorMissing(anchor))?;
    let mut rest: Vec<&Checkpoint> = ckpts.iter().filter(|c| c.step != anchor).copied().collect();
    if rest.len() < 2 {
        return Err(Error::TooFewCheckpoints {
            need: 3,
            got: ckpts.len(),
        });
    }
    rest.sort_by_key(|c| c.step);

    let base = flatten_trunk(anchor_ckpt, sel)?;
    let names: Vec<&str> = sel.select(anchor_ckpt);
    let mut steps = Vec::with_capacity(rest.len());
    let mut rows = Vec::with_capacity(rest.len());
    for c in rest {
        let cn = sel.select(c);
        if cn != names
            || cn
                .iter()
                .any(|n| c.tensors[*n].shape != anchor_ckpt.tensors[*n].shape)
        {
            return Err(Error::InconsistentCheckpoints(c.step));
        }
        let flat = flatten_trunk(c, sel)?;
        let mut row: Vec<f64> = flat.iter().zip(&base).map(|(a, b)| a - b).collect();
        if row_normalize {
            let n = norm(&row);
            // zero drift rows stay zero
            if n > 0.0 {
                row.iter_mut().for_each(|x| *x /= n);
            }
        }
        steps.push(c.step);
        rows.push(row);
    }
    Ok(DriftMatrix {
        anchor_step: anchor,
        steps,
        rows,
        row_normalized: row_normalize,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ckpt_with(step: u64, tensors: &[(&str, Vec<u64>, Vec<f32>)]) -> Checkpoint {
        let mut c = Checkpoint::new(step);
        for (name, shape, data) in tensors {
            c.tensors
                .insert(name.to_string(), TensorData::new(shape.clone(), data.clone()));
        }
        c
    }

    #[test]
    fn round_trip_single_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.dsck");
        let c = ckpt_with(7, &[("w", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0])]);
        write_checkpoint(&c, &path).unwrap();
        // header: 4 magic + 4 ver + 8 step + 4 count + (4 + 1 + 4 + 16) name block
        // payload: 16 bytes
        let len = std::fs::metadata(&path).unwrap().len();
        assert_eq!(len, 4 + 4 + 8 + 4 + 4 + 1 + 4 + 16 + 16);
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn empty_tensor_map_errors() {
        let dir = tempfile::tempdir().unwrap();
        let c = Checkpoint::new(0);
        assert!(matches!(
            write_checkpoint(&c, &dir.path().join("x.dsck")),
            Err(Error::NoTensors)
        ));
    }

    #[test]
    fn shape_data_mismatch_errors() {
        let dir = tempfile::tempdir().unwrap();
        let c = ckpt_with(0, &[("w", vec![3], vec![1.0])]);
        assert!(matches!(
            write_checkpoint(&c, &dir.path().join("x.dsck")),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn round_trip_many_random_tensors_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let dir = tempfile::tempdir().unwrap();
        let mut c = Checkpoint::new(123);
        for i in 0..1000 {
            let rank = rng.gen_range(0..3usize);
            let shape: Vec<u64> = (0..rank).map(|_| rng.gen_range(1..5u64)).collect();
            let n = shape.iter().product::<u64>() as usize;
            let data: Vec<f32> = (0..n).map(|_| rng.gen::<f32>() * 2.0 - 1.0).collect();
            c.tensors
                .insert(format!("t{i:04}"), TensorData::new(shape, data));
        }
        let p1 = dir.path().join("a.dsck");
        let p2 = dir.path().join("b.dsck");
        write_checkpoint(&c, &p1).unwrap();
        let back = read_checkpoint(&p1).unwrap();
        write_checkpoint(&back, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(back, c);
    }

    #[test]
    fn flatten_lexicographic_order() {
        let c = ckpt_with(
            0,
            &[
                ("block000.mlp.w_in", vec![1], vec![3.0]),
                ("block000.attn.wq", vec![2], vec![1.0, 2.0]),
            ],
        );
        let sel = TrunkSelector::trunk();
        let v = flatten_trunk(&c, &sel).unwrap();
        assert_eq!(v, vec![1.0, 2.0, 3.0]);
        // stable across calls
        assert_eq!(flatten_trunk(&c, &sel).unwrap(), v);
    }

    #[test]
    fn flatten_no_match_errors() {
        let c = ckpt_with(0, &[("embed.tok", vec![1], vec![1.0])]);
        assert!(matches!(
            flatten_trunk(&c, &TrunkSelector::trunk()),
            Err(Error::EmptySelection)
        ));
    }

    #[test]
    fn block_selector_and_index() {
        assert_eq!(TrunkSelector::block_index("block012.attn.wq"), Some(12));
        assert_eq!(TrunkSelector::block_index("embed.tok"), None);
        let sel = TrunkSelector::block(1);
        assert!(sel.matches("block001.attn.wo"));
        assert!(!sel.matches("block000.attn.wo"));
        assert!(!sel.matches("block001.ln1.g"));
    }

    fn linear_ckpts(dir_vec: &[f32], scale: &[f32]) -> Vec<Checkpoint> {
        scale
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let data: Vec<f32> = dir_vec.iter().map(|x| x * s).collect();
                ckpt_with(i as u64, &[("block000.attn.wq", vec![dir_vec.len() as u64], data)])
            })
            .collect()
    }

    #[test]
    fn drift_linear_trajectory() {
        // theta(t) = t*u, anchor 0 -> rows [u, 2u, 3u]
        let u = [0.6f32, 0.8];
        let ckpts = linear_ckpts(&u, &[0.0, 1.0, 2.0, 3.0]);
        let refs: Vec<&Checkpoint> = ckpts.iter().collect();
        let sel = TrunkSelector::trunk();
        let x = build_drift_matrix(&refs, 0, &sel, false).unwrap();
        assert_eq!(x.steps, vec![1, 2, 3]);
        for (i, row) in x.rows.iter().enumerate() {
            let s = (i + 1) as f64;
            assert!((row[0] - 0.6 * s).abs() < 1e-6);
            assert!((row[1] - 0.8 * s).abs() < 1e-6);
        }
        // with row-normalize all rows equal u
        let xn = build_drift_matrix(&refs, 0, &sel, true).unwrap();
        for row in &xn.rows {
            assert!((row[0] - 0.6).abs() < 1e-7);
            assert!((row[1] - 0.8).abs() < 1e-7);
        }
    }

    #[test]
    fn drift_identical_checkpoints_zero() {
        let u = [1.0f32, -2.0, 0.5];
        let ckpts = linear_ckpts(&u, &[1.0, 1.0, 1.0, 1.0]);
        let refs: Vec<&Checkpoint> = ckpts.iter().collect();
        let x = build_drift_matrix(&refs, 0, &TrunkSelector::trunk(), true).unwrap();
        for row in &x.rows {
            assert!(row.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn drift_single_pair_is_elementwise_difference() {
        let ckpts = linear_ckpts(&[1.0, 2.0], &[1.0, 3.0, 3.0]);
        let refs: Vec<&Checkpoint> = ckpts.iter().collect();
        let x = build_drift_matrix(&refs, 0, &TrunkSelector::trunk(), false).unwrap();
        assert!((x.rows[0][0] - 2.0).abs() < 1e-6);
        assert!((x.rows[0][1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn drift_anchor_missing() {
        let ckpts = linear_ckpts(&[1.0], &[0.0, 1.0, 2.0]);
        let refs: Vec<&Checkpoint> = ckpts.iter().collect();
        assert!(matches!(
            build_drift_matrix(&refs, 77, &TrunkSelector::trunk(), false),
            Err(Error::AnchorMissing(77))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn serialization_round_trip(seed in 0u64..1_000_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dir = tempfile::tempdir().unwrap();
            let mut c = Checkpoint::new(rng.gen::<u32>() as u64);
            let k = rng.gen_range(1..8usize);
            for i in 0..k {
                let rank = rng.gen_range(0..4usize);
                let shape: Vec<u64> = (0..rank).map(|_| rng.gen_range(1..6u64)).collect();
                let n = shape.iter().product::<u64>() as usize;
                let data: Vec<f32> =
                    (0..n).map(|_| f32::from_bits(rng.gen::<u32>() & 0x7f7f_ffff)).collect();
                c.tensors.insert(format!("n{i}"), TensorData::new(shape, data));
            }
            let p = dir.path().join("c.dsck");
            write_checkpoint(&c, &p).unwrap();
            let back = read_checkpoint(&p).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
