//! Named layer catalog: the classic CNN benchmark layers, a set of modern
//! layers (dilated, pixel-shuffle feeding, depthwise), spatial matching
//! correlations and plain GEMMs.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::workload::{
    make_conv, make_correlation, make_depthwise, make_gemm, ConvParams, Workload, WorkloadError,
};

/// Feature-map size used when a layer's input size is not pinned.
pub const DEFAULT_SPATIAL: usize = 56;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Depthwise,
    Correlation,
    Gemm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Classic,
    Modern,
    Matching,
    Gemm,
}

/// One catalog record. Unused fields are 0 (GEMM uses `m,n,k`; correlation
/// uses `c_in`, `in_w/in_h` as the output map and `disp_w/disp_h`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub name: String,
    pub kind: LayerKind,
    pub suite: Suite,
    pub stride: usize,
    pub k_w: usize,
    pub k_h: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub in_w: usize,
    pub in_h: usize,
    pub dilation: usize,
    pub disp_w: usize,
    pub disp_h: usize,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub zero_pad: bool,
}

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("unknown workload `{0}`")]
    Unknown(String),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("catalog file: {0}")]
    Csv(#[from] csv::Error),
}

impl CatalogEntry {
    fn conv(
        name: &str,
        suite: Suite,
        s: usize,
        kw: usize,
        kh: usize,
        ci: usize,
        co: usize,
    ) -> Self {
        CatalogEntry {
            name: name.into(),
            kind: LayerKind::Conv,
            suite,
            stride: s,
            k_w: kw,
            k_h: kh,
            c_in: ci,
            c_out: co,
            in_w: DEFAULT_SPATIAL,
            in_h: DEFAULT_SPATIAL,
            dilation: 1,
            disp_w: 0,
            disp_h: 0,
            m: 0,
            n: 0,
            k: 0,
            zero_pad: false,
        }
    }

    fn dilated(mut self, d: usize) -> Self {
        self.dilation = d;
        self
    }

    fn depthwise(name: &str, ch: usize, kw: usize, kh: usize) -> Self {
        let mut e = Self::conv(name, Suite::Modern, 1, kw, kh, ch, ch);
        e.kind = LayerKind::Depthwise;
        e
    }

    fn correlation(name: &str, c: usize, o: usize, disp: usize) -> Self {
        let mut e = Self::conv(name, Suite::Matching, 1, 1, 1, c, 0);
        e.kind = LayerKind::Correlation;
        e.in_w = o;
        e.in_h = o;
        e.disp_w = disp;
        e.disp_h = disp;
        e.zero_pad = true;
        e
    }

    /// Ad-hoc GEMM entry named `GEMM MxNxK`.
    pub fn custom_gemm(m: usize, n: usize, k: usize) -> Self {
        Self::gemm(&format!("GEMM {m}x{n}x{k}"), m, n, k)
    }

    fn gemm(name: &str, m: usize, n: usize, k: usize) -> Self {
        let mut e = Self::conv(name, Suite::Gemm, 0, 0, 0, 0, 0);
        e.kind = LayerKind::Gemm;
        e.in_w = 0;
        e.in_h = 0;
        e.dilation = 0;
        e.m = m;
        e.n = n;
        e.k = k;
        e
    }

    pub fn build(&self) -> Result<Workload, WorkloadError> {
        let mut w = match self.kind {
            LayerKind::Conv => make_conv(&ConvParams {
                c_in: self.c_in,
                c_out: self.c_out,
                in_w: self.in_w,
                in_h: self.in_h,
                k_w: self.k_w,
                k_h: self.k_h,
                stride: self.stride,
                dilation: self.dilation,
            })?,
            LayerKind::Depthwise => make_depthwise(
                self.c_in,
                self.in_w,
                self.in_h,
                self.k_w,
                self.k_h,
                self.stride,
                self.dilation,
            )?,
            LayerKind::Correlation => {
                make_correlation(self.c_in, self.in_w, self.in_h, self.disp_w, self.disp_h)?
            }
            LayerKind::Gemm => make_gemm(self.m, self.n, self.k)?,
        };
        w.name = self.name.clone();
        Ok(w)
    }

    /// Same layer on a square `spatial`×`spatial` input (conv-type layers only).
    pub fn at_spatial(&self, spatial: usize) -> Self {
        let mut e = self.clone();
        if matches!(self.kind, LayerKind::Conv | LayerKind::Depthwise) {
            e.in_w = spatial;
            e.in_h = spatial;
        }
        e
    }
}

pub fn catalog() -> Vec<CatalogEntry> {
    use Suite::Classic as C;
    let mut v = vec![
        CatalogEntry::conv("AL CONV1", C, 4, 11, 11, 3, 48),
        CatalogEntry::conv("AL CONV2", C, 1, 5, 5, 48, 128),
        CatalogEntry::conv("AL CONV3", C, 1, 3, 3, 128, 192),
        CatalogEntry::conv("AL CONV4", C, 1, 3, 3, 192, 192),
        CatalogEntry::conv("AL CONV5", C, 1, 3, 3, 192, 128),
        CatalogEntry::conv("TY CONV1", C, 1, 3, 3, 3, 16),
        CatalogEntry::conv("TY CONV2", C, 1, 3, 3, 16, 32),
        CatalogEntry::conv("TY CONV3", C, 1, 3, 3, 32, 64),
        CatalogEntry::conv("TY CONV4", C, 1, 3, 3, 64, 128),
        CatalogEntry::conv("TY CONV5", C, 1, 3, 3, 128, 256),
        CatalogEntry::conv("TY CONV6", C, 1, 3, 3, 256, 512),
        CatalogEntry::conv("TY CONV8", C, 1, 1, 1, 1024, 125),
        CatalogEntry::conv("IN 1x7", C, 1, 1, 7, 64, 64),
        CatalogEntry::conv("IN 7x1", C, 1, 7, 1, 64, 64),
        CatalogEntry::conv("SR CONV1", C, 1, 9, 9, 3, 64),
    ];
    let m = Suite::Modern;
    v.extend([
        CatalogEntry::conv("DL CONV d2", m, 1, 3, 3, 256, 256).dilated(2),
        CatalogEntry::conv("DL ASPP d6", m, 1, 3, 3, 256, 256).dilated(6),
        CatalogEntry::conv("ESPCN CONV1", m, 1, 5, 5, 1, 64),
        CatalogEntry::conv("ESPCN CONV2", m, 1, 3, 3, 64, 32),
        CatalogEntry::conv("ESPCN CONV3", m, 1, 3, 3, 32, 9),
        CatalogEntry::depthwise("MB DW3", 128, 3, 3),
        CatalogEntry::conv("MB PW", m, 1, 1, 1, 128, 128),
        CatalogEntry::correlation("FN CORR", 256, 28, 21),
        CatalogEntry::correlation("EVA BM", 3, 56, 9),
        CatalogEntry::gemm("MM 256", 256, 256, 256),
        CatalogEntry::gemm("MM 512x128x256", 512, 128, 256),
    ]);
    v
}

pub fn classic() -> Vec<CatalogEntry> {
    catalog()
        .into_iter()
        .filter(|e| e.suite == Suite::Classic)
        .collect()
}

pub fn find(name: &str) -> Result<CatalogEntry, CatalogError> {
    catalog()
        .into_iter()
        .find(|e| e.name.eq_ignore_ascii_case(name))
        .ok_or_else(|| CatalogError::Unknown(name.into()))
}

/// Entries whose name contains `pattern` (case-insensitive).
pub fn filter(entries: &[CatalogEntry], pattern: &str) -> Vec<CatalogEntry> {
    let p = pattern.to_ascii_lowercase();
    entries
        .iter()
        .filter(|e| e.name.to_ascii_lowercase().contains(&p))
        .cloned()
        .collect()
}

pub fn write_catalog<W: Write>(entries: &[CatalogEntry], out: W) -> Result<(), CatalogError> {
    let mut wtr = csv::Writer::from_writer(out);
    for e in entries {
        wtr.serialize(e)?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_catalog<R: Read>(input: R) -> Result<Vec<CatalogEntry>, CatalogError> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut v = Vec::new();
    for rec in rdr.deserialize() {
        v.push(rec?);
    }
    Ok(v)
}
