//! Centroid table and its file format: `u32` LE header length, JSON header,
//! then `K·D` centroid values as `f32` LE.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::features::{FeatureMap, FeatureMapSpec};
use super::kmeans::{kmeans, nearest};
use crate::env::Frame;
use crate::error::{Result, VocError};
use crate::rng::{rng_for, streams};

pub const CODEBOOK_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    centroids: Vec<Vec<f64>>,
    feature_map: FeatureMapSpec,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "D")]
    d: usize,
    patch_grid: [usize; 2],
    feature_map: FeatureMapSpec,
    version: u32,
}

impl Codebook {
    /// Centroids are stored at `f32` precision so a saved codebook reloads
    /// bit-identically.
    pub fn new(centroids: Vec<Vec<f64>>, feature_map: FeatureMapSpec) -> Result<Self> {
        let k = centroids.len();
        if k < 2 || k > u16::MAX as usize + 1 {
            return Err(VocError::InvalidInput(format!(
                "codebook size {k} outside [2, 65536]"
            )));
        }
        let d = centroids[0].len();
        if d == 0 || centroids.iter().any(|c| c.len() != d) {
            return Err(VocError::InvalidInput(
                "centroids must share a positive dimension".into(),
            ));
        }
        let centroids: Vec<Vec<f64>> = centroids
            .into_iter()
            .map(|c| c.into_iter().map(|x| x as f32 as f64).collect())
            .collect();
        let mut seen = BTreeMap::new();
        for (i, c) in centroids.iter().enumerate() {
            let key: Vec<u64> = c.iter().map(|x| x.to_bits()).collect();
            if let Some(j) = seen.insert(key, i) {
                return Err(VocError::DegenerateCorpus(format!(
                    "centroids {j} and {i} coincide"
                )));
            }
        }
        Ok(Self {
            centroids,
            feature_map,
        })
    }

    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn dim(&self) -> usize {
        self.centroids[0].len()
    }

    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    pub fn centroid(&self, token: u16) -> Result<&[f64]> {
        self.centroids
            .get(token as usize)
            .map(Vec::as_slice)
            .ok_or_else(|| VocError::InvalidInput(format!("token {token} >= K = {}", self.k())))
    }

    pub fn feature_map(&self) -> &FeatureMapSpec {
        &self.feature_map
    }

    pub fn patch_grid(&self) -> [usize; 2] {
        self.feature_map.patch_grid()
    }

    /// Nearest centroid and its squared distance.
    pub fn quantize(&self, x: &[f64]) -> Result<(u16, f64)> {
        if x.len() != self.dim() {
            return Err(VocError::InvalidInput(format!(
                "segment of length {} for codebook dimension {}",
                x.len(),
                self.dim()
            )));
        }
        let (i, d) = nearest(&self.centroids, x);
        Ok((i as u16, d))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            k: self.k(),
            d: self.dim(),
            patch_grid: self.patch_grid(),
            feature_map: self.feature_map.clone(),
            version: CODEBOOK_VERSION,
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        for c in &self.centroids {
            for x in c {
                w.write_all(&(*x as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;
        if header.version != CODEBOOK_VERSION {
            return Err(VocError::Format(format!(
                "codebook version {}",
                header.version
            )));
        }
        if header.patch_grid != header.feature_map.patch_grid() {
            return Err(VocError::Format(
                "patch_grid disagrees with feature map".into(),
            ));
        }
        let mut blob = vec![0u8; header.k * header.d * 4];
        r.read_exact(&mut blob)?;
        let values: Vec<f64> = blob
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let centroids = values
            .chunks(header.d.max(1))
            .map(<[f64]>::to_vec)
            .collect();
        Self::new(centroids, header.feature_map)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::fs::read(path)?.as_slice())
    }
}

/// Fits `k` centroids to every segment of every frame.
pub fn fit_codebook(
    frames: &[Frame],
    fmap: &dyn FeatureMap,
    k: usize,
    seed: u64,
) -> Result<Codebook> {
    let d = fmap.segment_dim();
    let mut counts: BTreeMap<Vec<u64>, f64> = BTreeMap::new();
    for f in frames {
        for seg in fmap.features(f)?.chunks(d) {
            *counts
                .entry(seg.iter().map(|x| x.to_bits()).collect())
                .or_insert(0.0) += 1.0;
        }
    }
    let points: Vec<Vec<f64>> = counts
        .keys()
        .map(|k| k.iter().map(|b| f64::from_bits(*b)).collect())
        .collect();
    let weights: Vec<f64> = counts.values().copied().collect();
    let km = kmeans(&points, &weights, k, &mut rng_for(seed, streams::KMEANS))?;
    Codebook::new(km.centroids, fmap.spec())
}
