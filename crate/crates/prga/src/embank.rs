//! Embedding banks, classifier weight matrices, and patch tiling.
//!
//! A bank holds, per image, one global embedding plus `P` patch embeddings
//! and an integer label, all produced by an external feature extractor.
//! Files are little-endian and round-trip bit for bit; values are stored as
//! `f32` exactly as written.
//!
//! `EBK1` layout: magic `EBK1`, `u32` item count, `u32` dim, `u32` patches
//! per item, `u32` class count, then the class names (`u16` length prefix +
//! UTF-8 bytes each), then per item `[u32 label][dim f32 global]
//! [patches*dim f32 patch matrix]`.
//!
//! `WCM1` layout: magic `WCM1`, `u32` class count, `u32` dim, then
//! `classes*dim` f32 row-major.

use std::fs;
use std::path::Path;

use crate::bytesio::{put_f32, put_u16, put_u32, Cursor};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::rng::SplitMix64;

/// Norm threshold below which a vector cannot be normalized.
pub const EPS_NORM: f64 = 1e-12;

const EBK_MAGIC: &[u8; 4] = b"EBK1";
const WCM_MAGIC: &[u8; 4] = b"WCM1";

/// Per-image global + patch embeddings with labels and class names.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBank {
    dim: usize,
    patches_per_item: usize,
    labels: Vec<u32>,
    /// item_count x dim, row-major
    globals: Vec<f32>,
    /// item_count x (patches_per_item * dim), row-major per item
    patches: Vec<f32>,
    class_names: Vec<String>,
}

impl EmbeddingBank {
    pub fn new(
        dim: usize,
        patches_per_item: usize,
        labels: Vec<u32>,
        globals: Vec<f32>,
        patches: Vec<f32>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let bank = Self {
            dim,
            patches_per_item,
            labels,
            globals,
            patches,
            class_names,
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn item_count(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn patches_per_item(&self) -> usize {
        self.patches_per_item
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn label(&self, item: usize) -> usize {
        self.labels[item] as usize
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn global(&self, item: usize) -> &[f32] {
        &self.globals[item * self.dim..(item + 1) * self.dim]
    }

    pub fn global_f64(&self, item: usize) -> Vec<f64> {
        self.global(item).iter().map(|&v| f64::from(v)).collect()
    }

    /// Patch matrix of one item as P x d in f64.
    pub fn patches_mat(&self, item: usize) -> Mat {
        let stride = self.patches_per_item * self.dim;
        let raw = &self.patches[item * stride..(item + 1) * stride];
        Mat::from_vec(
            self.patches_per_item,
            self.dim,
            raw.iter().map(|&v| f64::from(v)).collect(),
        )
    }

    /// Item indices grouped by class label, classes in label order.
    pub fn items_by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.class_count()];
        for (i, &label) in self.labels.iter().enumerate() {
            groups[label as usize].push(i);
        }
        groups
    }

    /// Sub-bank containing the given items, in the given order.
    pub fn subset(&self, items: &[usize]) -> EmbeddingBank {
        let stride = self.patches_per_item * self.dim;
        let mut labels = Vec::with_capacity(items.len());
        let mut globals = Vec::with_capacity(items.len() * self.dim);
        let mut patches = Vec::with_capacity(items.len() * stride);
        for &i in items {
            labels.push(self.labels[i]);
            globals.extend_from_slice(self.global(i));
            patches.extend_from_slice(&self.patches[i * stride..(i + 1) * stride]);
        }
        EmbeddingBank {
            dim: self.dim,
            patches_per_item: self.patches_per_item,
            labels,
            globals,
            patches,
            class_names: self.class_names.clone(),
        }
    }

    fn validate(&self) -> Result<()> {
        let n = self.class_count();
        if n < 2 {
            return Err(Error::Config(format!("bank needs >= 2 classes, got {n}")));
        }
        if self.dim == 0 || self.patches_per_item == 0 {
            return Err(Error::Config(format!(
                "bank dims must be positive (dim {}, patches {})",
                self.dim, self.patches_per_item
            )));
        }
        let m = self.labels.len();
        if self.globals.len() != m * self.dim
            || self.patches.len() != m * self.patches_per_item * self.dim
        {
            return Err(Error::Config("bank buffer sizes inconsistent".into()));
        }
        let layout = BankLayout::of(self);
        for (i, &label) in self.labels.iter().enumerate() {
            if label as usize >= n {
                return Err(Error::LabelOutOfRange {
                    offset: layout.label_offset(i),
                    label,
                    classes: n as u32,
                });
            }
        }
        for (i, &v) in self.globals.iter().enumerate() {
            if !v.is_finite() {
                let (item, j) = (i / self.dim, i % self.dim);
                return Err(Error::NonFiniteValue {
                    offset: layout.global_offset(item, j),
                    context: format!("global[{item}][{j}]"),
                });
            }
        }
        let stride = self.patches_per_item * self.dim;
        for (i, &v) in self.patches.iter().enumerate() {
            if !v.is_finite() {
                let (item, k) = (i / stride, i % stride);
                return Err(Error::NonFiniteValue {
                    offset: layout.patch_offset(item, k),
                    context: format!("patches[{item}][{}][{}]", k / self.dim, k % self.dim),
                });
            }
        }
        Ok(())
    }
}

/// Byte offsets of the EBK1 layout, for error reporting.
struct BankLayout {
    records_start: u64,
    record_size: u64,
    dim: u64,
}

impl BankLayout {
    fn of(bank: &EmbeddingBank) -> Self {
        let names_len: u64 = bank
            .class_names
            .iter()
            .map(|n| 2 + n.len() as u64)
            .sum();
        Self {
            records_start: 20 + names_len,
            record_size: 4 + 4 * bank.dim as u64 * (1 + bank.patches_per_item as u64),
            dim: bank.dim as u64,
        }
    }

    fn label_offset(&self, item: usize) -> u64 {
        self.records_start + item as u64 * self.record_size
    }

    fn global_offset(&self, item: usize, j: usize) -> u64 {
        self.label_offset(item) + 4 + 4 * j as u64
    }

    fn patch_offset(&self, item: usize, k: usize) -> u64 {
        self.label_offset(item) + 4 + 4 * self.dim + 4 * k as u64
    }
}

/// Zero-shot classifier prototypes, one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierWeights {
    classes: usize,
    dim: usize,
    /// classes x dim row-major
    rows: Vec<f32>,
}

impl ClassifierWeights {
    pub fn new(classes: usize, dim: usize, rows: Vec<f32>) -> Result<Self> {
        if rows.len() != classes * dim {
            return Err(Error::Config("classifier buffer size inconsistent".into()));
        }
        for (i, &v) in rows.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFiniteValue {
                    offset: 12 + 4 * i as u64,
                    context: format!("classifier[{}][{}]", i / dim, i % dim),
                });
            }
        }
        Ok(Self {
            classes,
            dim,
            rows,
        })
    }

    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            classes,
            dim,
            rows: vec![0.0; classes * dim],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn to_mat(&self) -> Mat {
        Mat::from_vec(
            self.classes,
            self.dim,
            self.rows.iter().map(|&v| f64::from(v)).collect(),
        )
    }

    pub fn from_mat(m: &Mat) -> Self {
        Self {
            classes: m.rows(),
            dim: m.cols(),
            rows: m.data().iter().map(|&v| v as f32).collect(),
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read and validate an EBK1 bank.
pub fn load_bank(path: &Path) -> Result<EmbeddingBank> {
    let buf = read_file(path)?;
    let mut cur = Cursor::new(&buf);
    cur.magic(EBK_MAGIC)?;
    let m = cur.u32()? as usize;
    let dim = cur.u32()? as usize;
    let patches_per_item = cur.u32()? as usize;
    let n = cur.u32()? as usize;

    let mut class_names = Vec::with_capacity(n);
    for _ in 0..n {
        let len = cur.u16()? as usize;
        let offset = cur.offset();
        let bytes = cur.take(len)?;
        let name = std::str::from_utf8(bytes)
            .map_err(|_| Error::Config(format!("invalid UTF-8 class name at offset {offset}")))?;
        class_names.push(name.to_string());
    }

    let mut labels = Vec::with_capacity(m);
    let mut globals = Vec::with_capacity(m * dim);
    let mut patches = Vec::with_capacity(m * patches_per_item * dim);
    for _ in 0..m {
        labels.push(cur.u32()?);
        globals.extend(cur.f32s(dim)?);
        patches.extend(cur.f32s(patches_per_item * dim)?);
    }

    EmbeddingBank::new(dim, patches_per_item, labels, globals, patches, class_names)
}

/// Validate and write a bank as EBK1; `load_bank` reproduces it bit for bit.
pub fn write_bank(bank: &EmbeddingBank, path: &Path) -> Result<()> {
    bank.validate()?;
    let mut buf = Vec::new();
    buf.extend_from_slice(EBK_MAGIC);
    put_u32(&mut buf, bank.item_count() as u32);
    put_u32(&mut buf, bank.dim as u32);
    put_u32(&mut buf, bank.patches_per_item as u32);
    put_u32(&mut buf, bank.class_count() as u32);
    for name in &bank.class_names {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(Error::Config(format!("class name too long: {} bytes", bytes.len())));
        }
        put_u16(&mut buf, bytes.len() as u16);
        buf.extend_from_slice(bytes);
    }
    let stride = bank.patches_per_item * bank.dim;
    for i in 0..bank.item_count() {
        put_u32(&mut buf, bank.labels[i]);
        for &v in bank.global(i) {
            put_f32(&mut buf, v);
        }
        for &v in &bank.patches[i * stride..(i + 1) * stride] {
            put_f32(&mut buf, v);
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Read a WCM1 classifier weight matrix.
pub fn load_classifier(path: &Path) -> Result<ClassifierWeights> {
    let buf = read_file(path)?;
    let mut cur = Cursor::new(&buf);
    cur.magic(WCM_MAGIC)?;
    let n = cur.u32()? as usize;
    let dim = cur.u32()? as usize;
    let rows = cur.f32s(n * dim)?;
    ClassifierWeights::new(n, dim, rows)
}

/// Write a WCM1 classifier weight matrix.
pub fn write_classifier(wc: &ClassifierWeights, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(WCM_MAGIC);
    put_u32(&mut buf, wc.classes as u32);
    put_u32(&mut buf, wc.dim as u32);
    for &v in &wc.rows {
        put_f32(&mut buf, v);
    }
    fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Scale a vector to unit Euclidean norm.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::Config("non-finite input to l2_normalize".into()));
    }
    if norm <= EPS_NORM {
        return Err(Error::ZeroVector {
            norm,
            eps: EPS_NORM,
        });
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Pixel rectangle, `x y w h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

/// Grid tiling request for the external patch extractor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileSpec {
    pub image_w: u32,
    pub image_h: u32,
    pub grids: Vec<(u32, u32)>,
    pub include_full: bool,
}

/// Rectangles tiling the image, row-major per grid, grids in declaration
/// order, full frame last when requested. Remainder pixels of non-divisible
/// grids go to the last row/column.
pub fn tile_rects(spec: &TileSpec) -> Result<Vec<Rect>> {
    let mut rects = Vec::new();
    for &(rows, cols) in &spec.grids {
        if rows == 0 || cols == 0 {
            return Err(Error::Config(format!(
                "grid dimensions must be >= 1, got {rows}x{cols}"
            )));
        }
        if cols > spec.image_w || rows > spec.image_h {
            return Err(Error::GridTooFine {
                rows,
                cols,
                width: spec.image_w,
                height: spec.image_h,
            });
        }
        let base_w = spec.image_w / cols;
        let base_h = spec.image_h / rows;
        for r in 0..rows {
            let y = r * base_h;
            let h = if r == rows - 1 { spec.image_h - y } else { base_h };
            for c in 0..cols {
                let x = c * base_w;
                let w = if c == cols - 1 { spec.image_w - x } else { base_w };
                rects.push(Rect { x, y, w, h });
            }
        }
    }
    if spec.include_full {
        rects.push(Rect {
            x: 0,
            y: 0,
            w: spec.image_w,
            h: spec.image_h,
        });
    }
    Ok(rects)
}

/// Deterministic random bank for fixtures and gradient audits: unit-scale
/// Gaussian patches and globals, labels cycling through the classes.
pub fn random_bank(
    classes: usize,
    per_class: usize,
    dim: usize,
    patches_per_item: usize,
    seed: u64,
) -> EmbeddingBank {
    let mut rng = SplitMix64::new(seed);
    let m = classes * per_class;
    let mut labels = Vec::with_capacity(m);
    let mut globals = Vec::with_capacity(m * dim);
    let mut patches = Vec::with_capacity(m * patches_per_item * dim);
    for c in 0..classes {
        for _ in 0..per_class {
            labels.push(c as u32);
            for _ in 0..dim {
                globals.push(rng.next_gaussian() as f32);
            }
            for _ in 0..patches_per_item * dim {
                patches.push(rng.next_gaussian() as f32);
            }
        }
    }
    let class_names = (0..classes).map(|c| format!("class_{c}")).collect();
    EmbeddingBank::new(dim, patches_per_item, labels, globals, patches, class_names)
        .expect("random bank is valid by construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_bank() -> EmbeddingBank {
        EmbeddingBank::new(
            4,
            1,
            vec![0, 1],
            vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0],
            vec!["a".into(), "b".into()],
        )
        .unwrap()
    }

    #[test]
    fn round_trip_tiny() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("tiny.ebk");
        let bank = tiny_bank();
        write_bank(&bank, &path).unwrap();
        let back = load_bank(&path).unwrap();
        assert_eq!(back.item_count(), 2);
        assert_eq!(back.dim(), 4);
        assert_eq!(back, bank);
    }

    #[test]
    fn bad_magic_names_offset() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.ebk");
        let bank = tiny_bank();
        write_bank(&bank, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[3] = b'2'; // EBK2
        fs::write(&path, &bytes).unwrap();
        match load_bank(&path) {
            Err(Error::BadMagic { offset, found, .. }) => {
                assert_eq!(offset, 0);
                assert_eq!(found, "EBK2");
            }
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_names_offset() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("trunc.ebk");
        write_bank(&tiny_bank(), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        match load_bank(&path) {
            Err(Error::TruncatedFile { offset, .. }) => {
                assert!(offset > 0);
            }
            other => panic!("expected TruncatedFile, got {other:?}"),
        }
    }

    #[test]
    fn label_out_of_range_detected() {
        let mut bank = tiny_bank();
        bank.labels[1] = 7;
        assert!(matches!(
            bank.validate(),
            Err(Error::LabelOutOfRange { label: 7, classes: 2, .. })
        ));
    }

    #[test]
    fn nan_rejected_before_write() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("nan.ebk");
        let mut bank = tiny_bank();
        bank.globals[2] = f32::NAN;
        match write_bank(&bank, &path) {
            Err(Error::NonFiniteValue { context, .. }) => {
                assert!(context.contains("global[0][2]"));
            }
            other => panic!("expected NonFiniteValue, got {other:?}"),
        }
        assert!(!path.exists());
    }

    #[test]
    fn fixture_bank_rewrite_is_bitwise_equal() {
        // write -> load -> write, compare bytes
        let dir = tempdir().unwrap();
        let p1 = dir.path().join("a.ebk");
        let p2 = dir.path().join("b.ebk");
        let bank = random_bank(3, 2, 5, 4, 99);
        write_bank(&bank, &p1).unwrap();
        let back = load_bank(&p1).unwrap();
        write_bank(&back, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn hundred_item_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("big.ebk");
        let bank = random_bank(4, 25, 8, 3, 5);
        assert_eq!(bank.item_count(), 100);
        write_bank(&bank, &path).unwrap();
        assert_eq!(load_bank(&path).unwrap(), bank);
    }

    #[test]
    fn classifier_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("wc.wcm");
        let wc = ClassifierWeights::new(2, 3, vec![0.5, -1.0, 2.0, 0.25, 0.0, -3.5]).unwrap();
        write_classifier(&wc, &path).unwrap();
        assert_eq!(load_classifier(&path).unwrap(), wc);
    }

    #[test]
    fn l2_normalize_three_four() {
        let out = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((out[0] - 0.6).abs() < 1e-15);
        assert!((out[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_unit_is_identity() {
        let v = vec![0.0, 1.0, 0.0];
        assert_eq!(l2_normalize(&v).unwrap(), v);
    }

    #[test]
    fn l2_normalize_zero_vector_fails() {
        assert!(matches!(
            l2_normalize(&[0.0, 0.0]),
            Err(Error::ZeroVector { .. })
        ));
    }

    #[test]
    fn l2_normalize_idempotent() {
        let once = l2_normalize(&[0.3, -2.7, 1.1, 4.0]).unwrap();
        let twice = l2_normalize(&once).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn tiles_336_3x3() {
        let spec = TileSpec {
            image_w: 336,
            image_h: 336,
            grids: vec![(3, 3)],
            include_full: false,
        };
        let rects = tile_rects(&spec).unwrap();
        assert_eq!(rects.len(), 9);
        assert!(rects.iter().all(|r| r.w == 112 && r.h == 112));
        assert_eq!(rects[0], Rect { x: 0, y: 0, w: 112, h: 112 });
        assert_eq!(rects[8], Rect { x: 224, y: 224, w: 112, h: 112 });
    }

    #[test]
    fn tiles_26_patch_setting() {
        let spec = TileSpec {
            image_w: 336,
            image_h: 336,
            grids: vec![(3, 3), (4, 4)],
            include_full: true,
        };
        let rects = tile_rects(&spec).unwrap();
        assert_eq!(rects.len(), 26);
        assert_eq!(
            rects[25],
            Rect { x: 0, y: 0, w: 336, h: 336 }
        );
    }

    #[test]
    fn tiles_remainder_goes_last() {
        let spec = TileSpec {
            image_w: 10,
            image_h: 10,
            grids: vec![(3, 3)],
            include_full: false,
        };
        let rects = tile_rects(&spec).unwrap();
        // columns split 3,3,4; same for rows
        assert_eq!(rects[0].w, 3);
        assert_eq!(rects[2].w, 4);
        assert_eq!(rects[2].x, 6);
        assert_eq!(rects[8].h, 4);
        let area: u32 = rects.iter().map(|r| r.w * r.h).sum();
        assert_eq!(area, 100);
    }

    #[test]
    fn tiles_grid_too_fine() {
        let spec = TileSpec {
            image_w: 2,
            image_h: 2,
            grids: vec![(3, 3)],
            include_full: false,
        };
        assert!(matches!(tile_rects(&spec), Err(Error::GridTooFine { .. })));
    }
}
