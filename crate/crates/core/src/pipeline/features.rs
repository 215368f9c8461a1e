//! Signature extraction: activations in, one meta-feature row per sample out.

use std::borrow::Cow;
use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{
    read_activation, ActivationMatrix, CovarianceAxis, DataError, DatasetManifest, Layout,
    SampleRecord,
};
use crate::spectral::{signature, SpectralError};
use crate::synth::SynthDataset;

use super::{with_pool, PipelineError};

/// Anything that can hand out activation matrices by (sample, component)
/// position.
pub trait ActivationSource: Sync {
    fn layout(&self) -> &Layout;
    fn samples(&self) -> &[SampleRecord];
    fn activation(
        &self,
        sample: usize,
        component: usize,
    ) -> Result<Cow<'_, ActivationMatrix>, DataError>;
}

impl ActivationSource for DatasetManifest {
    fn layout(&self) -> &Layout {
        DatasetManifest::layout(self)
    }

    fn samples(&self) -> &[SampleRecord] {
        DatasetManifest::samples(self)
    }

    fn activation(
        &self,
        sample: usize,
        component: usize,
    ) -> Result<Cow<'_, ActivationMatrix>, DataError> {
        let id = &self.layout().components()[component].id();
        read_activation(self, &self.samples()[sample].sample_id, id).map(Cow::Owned)
    }
}

impl ActivationSource for SynthDataset {
    fn layout(&self) -> &Layout {
        &self.layout
    }

    fn samples(&self) -> &[SampleRecord] {
        &self.samples
    }

    fn activation(
        &self,
        sample: usize,
        component: usize,
    ) -> Result<Cow<'_, ActivationMatrix>, DataError> {
        Ok(Cow::Borrowed(&self.activations[sample][component]))
    }
}

/// Per-sample spectral signatures, `signatures[sample][component]` each of
/// length `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    pub layout: Layout,
    pub samples: Vec<SampleRecord>,
    pub k: usize,
    pub signatures: Vec<Vec<Vec<f64>>>,
}

impl FeatureTable {
    /// Meta-feature rows truncated to the top `k` eigenvalues per component.
    /// Truncation equals re-extraction at `k` because signatures are sorted
    /// prefixes.
    pub fn rows(&self, k: usize) -> Vec<Vec<f64>> {
        assert!(k >= 1 && k <= self.k, "k={k} outside 1..={}", self.k);
        self.signatures
            .iter()
            .map(|comps| comps.iter().flat_map(|s| s[..k].iter().copied()).collect())
            .collect()
    }

    pub fn labels(&self) -> Vec<&str> {
        self.samples
            .iter()
            .map(|s| s.class_label.as_str())
            .collect()
    }

    /// Column names like `B0.HSGAL1[3]`.
    pub fn feature_names(&self, k: usize) -> Vec<String> {
        self.layout
            .component_ids()
            .flat_map(|id| (0..k).map(move |i| format!("{id}[{i}]")))
            .collect()
    }

    /// Wide CSV: `sample_id,class_label,<features...>`.
    pub fn to_csv(&self) -> Result<Vec<u8>, csv::Error> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["sample_id".to_string(), "class_label".to_string()];
        header.extend(self.feature_names(self.k));
        w.write_record(&header)?;
        for (s, row) in self.samples.iter().zip(self.rows(self.k)) {
            let mut rec = vec![s.sample_id.clone(), s.class_label.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.into_inner().map_err(|e| csv::Error::from(e.into_error()))
    }
}

/// Sample groups for CROSS_SAMPLE components: same-class samples in input
/// order, chunked by `group_size`. A trailing chunk smaller than half a
/// group joins the previous one.
pub fn cross_sample_groups(samples: &[SampleRecord], group_size: usize) -> Vec<Vec<usize>> {
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_class.entry(&s.class_label).or_default().push(i);
    }
    let mut groups = Vec::new();
    for members in by_class.into_values() {
        let mut chunks: Vec<Vec<usize>> =
            members.chunks(group_size).map(<[usize]>::to_vec).collect();
        if chunks.len() > 1 && chunks.last().unwrap().len() * 2 < group_size {
            let tail = chunks.pop().unwrap();
            chunks.last_mut().unwrap().extend(tail);
        }
        groups.extend(chunks);
    }
    groups
}

/// Computes top-`k` signatures for every (sample, component).
pub fn extract_features<S: ActivationSource + ?Sized>(
    source: &S,
    k: usize,
    group_size: usize,
    jobs: usize,
) -> Result<FeatureTable, PipelineError> {
    if k == 0 {
        return Err(SpectralError::InvalidK.into());
    }
    let layout = source.layout().clone();
    let samples = source.samples().to_vec();
    let comps = layout.components();
    let cross: Vec<usize> = (0..comps.len())
        .filter(|&c| comps[c].axis == CovarianceAxis::CrossSample)
        .collect();

    let mut signatures: Vec<Vec<Vec<f64>>> = with_pool(jobs, || {
        (0..samples.len())
            .into_par_iter()
            .map(|s| {
                (0..comps.len())
                    .map(|c| {
                        if cross.contains(&c) {
                            return Ok(Vec::new());
                        }
                        let a = source.activation(s, c)?;
                        Ok(signature(&a, k)?.values)
                    })
                    .collect::<Result<Vec<_>, PipelineError>>()
            })
            .collect::<Result<Vec<_>, _>>()
    })?;

    if !cross.is_empty() {
        let groups = cross_sample_groups(&samples, group_size);
        let work: Vec<(usize, usize)> = groups
            .iter()
            .enumerate()
            .flat_map(|(g, _)| cross.iter().map(move |&c| (g, c)))
            .collect();
        let results: Vec<Vec<f64>> = with_pool(jobs, || {
            work.par_iter()
                .map(|&(g, c)| {
                    let mats = groups[g]
                        .iter()
                        .map(|&s| source.activation(s, c))
                        .collect::<Result<Vec<_>, _>>()?;
                    let refs: Vec<&ActivationMatrix> = mats.iter().map(|m| m.as_ref()).collect();
                    let stacked = ActivationMatrix::hstack(comps[c].id(), &refs)?;
                    Ok(signature(&stacked, k)?.values)
                })
                .collect::<Result<Vec<_>, PipelineError>>()
        })?;
        for (&(g, c), sig) in work.iter().zip(results) {
            for &s in &groups[g] {
                signatures[s][c] = sig.clone();
            }
        }
    }

    Ok(FeatureTable {
        layout,
        samples,
        k,
        signatures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recs(labels: &[&str]) -> Vec<SampleRecord> {
        labels
            .iter()
            .enumerate()
            .map(|(i, l)| SampleRecord {
                sample_id: format!("s{i}"),
                class_label: l.to_string(),
                detector_score: None,
            })
            .collect()
    }

    #[test]
    fn groups_merge_small_tail() {
        let s = recs(&["a", "a", "a", "a", "a", "b", "b", "b"]);
        // a: 5 samples at size 4 -> tail of 1 merges; b: 3 samples -> one group
        assert_eq!(
            cross_sample_groups(&s, 4),
            vec![vec![0, 1, 2, 3, 4], vec![5, 6, 7]]
        );
        let s = recs(&["a"; 6]);
        assert_eq!(
            cross_sample_groups(&s, 4),
            vec![vec![0, 1, 2, 3], vec![4, 5]]
        );
    }
}
