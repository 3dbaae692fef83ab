use crate::data::sequence::{FeatureSequence, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-modality features sampled at 1 fps; frame `j` carries timestamp `start_time + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStream {
    pub start_time: f64,
    /// Per modality, `N × dim`.
    pub frames: Vec<Tensor<f32>>,
    pub labels: Option<Vec<u32>>,
}

impl FeatureStream {
    pub fn frame_count(&self) -> usize {
        self.frames.first().map_or(0, |f| f.rows())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HistoryPolicy {
    /// Repeat the earliest frame to fill missing history. A window with no
    /// observed frame is still rejected.
    #[default]
    Pad,
    /// Report the window as unusable.
    Drop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Windowed {
    pub sequence: FeatureSequence,
    /// Frames synthesized by left-padding.
    pub padded: usize,
}

/// Observation timestamps `t_k = tau_s − tau_a − (T − k)`, `k = 1..=T`, `T = round(tau_o)`.
pub fn window_timestamps(tau_s: f64, tau_a: f64, tau_o: f64) -> Vec<f64> {
    let t = tau_o.round().max(0.0) as usize;
    (1..=t).map(|k| tau_s - tau_a - (t - k) as f64).collect()
}

/// Cuts the observation window ending `tau_a` seconds before `tau_s`. Each
/// timestamp maps to the latest frame at or before it, so nothing after
/// `tau_s − tau_a` is read.
pub fn window_features(
    stream: &FeatureStream,
    sample_id: &str,
    tau_s: f64,
    tau_a: f64,
    tau_o: f64,
    next_label: u32,
    policy: HistoryPolicy,
) -> Result<Windowed> {
    let stamps = window_timestamps(tau_s, tau_a, tau_o);
    let n = stream.frame_count();
    if stamps.is_empty() {
        return Err(Error::Invalid(format!("observation length {tau_o} gives no frames")));
    }
    if n == 0 {
        return Err(Error::Empty("feature stream"));
    }
    let mut idx = Vec::with_capacity(stamps.len());
    let mut deficit = 0;
    for &t in &stamps {
        let pos = ((t - stream.start_time) + 1e-9).floor();
        if pos < 0.0 {
            deficit += 1;
            idx.push(None);
        } else if pos as usize >= n {
            return Err(Error::StreamTooShort {
                stream_end: stream.start_time + (n - 1) as f64,
                window_end: *stamps.last().expect("non-empty"),
            });
        } else {
            idx.push(Some(pos as usize));
        }
    }
    // With no observed frame at all, the earliest frame lies after the
    // window edge and repeating it would leak the future.
    if deficit > 0 && (policy == HistoryPolicy::Drop || deficit == stamps.len()) {
        return Err(Error::InsufficientHistory {
            needed: stamps.len(),
            deficit,
        });
    }
    let features = stream
        .frames
        .iter()
        .map(|m| {
            let d = m.cols();
            let mut data = Vec::with_capacity(idx.len() * d);
            for i in &idx {
                data.extend_from_slice(m.row(i.unwrap_or(0)));
            }
            Tensor::new(vec![idx.len(), d], data)
        })
        .collect::<Result<Vec<_>>>()?;
    let frame_labels = stream.labels.as_ref().map(|labels| {
        idx.iter()
            .map(|i| i.map_or(IGNORE_LABEL, |i| labels[i]))
            .collect()
    });
    Ok(Windowed {
        sequence: FeatureSequence {
            sample_id: sample_id.to_string(),
            features,
            frame_labels,
            next_label,
            tau_s,
            tau_a,
            tau_o,
        },
        padded: deficit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(start: f64, n: usize) -> FeatureStream {
        let data: Vec<f32> = (0..n).map(|i| i as f32).collect();
        FeatureStream {
            start_time: start,
            frames: vec![Tensor::new(vec![n, 1], data).unwrap()],
            labels: Some((0..n as u32).collect()),
        }
    }

    #[test]
    fn timestamps_end_at_anticipation_gap() {
        let ts = window_timestamps(20.0, 1.0, 10.0);
        assert_eq!(ts, (10..=19).map(f64::from).collect::<Vec<_>>());
        assert_eq!(window_timestamps(20.0, 1.0, 1.0), vec![19.0]);
    }

    #[test]
    fn window_reads_the_right_frames() {
        let s = stream(0.0, 30);
        let w = window_features(&s, "a", 20.0, 1.0, 10.0, 3, HistoryPolicy::Pad).unwrap();
        assert_eq!(w.padded, 0);
        let got: Vec<f32> = w.sequence.features[0].data().to_vec();
        assert_eq!(got, (10..20).map(|v| v as f32).collect::<Vec<_>>());
    }

    #[test]
    fn short_history_is_padded_or_dropped() {
        let s = stream(5.0, 30);
        // timestamps 2..=11 against a stream starting at t=5: three frames missing
        let w = window_features(&s, "a", 12.0, 1.0, 10.0, 0, HistoryPolicy::Pad).unwrap();
        assert_eq!(w.padded, 3);
        assert_eq!(&w.sequence.features[0].data()[..5], &[0.0, 0.0, 0.0, 0.0, 1.0]);
        let labels = w.sequence.frame_labels.as_ref().unwrap();
        assert_eq!(labels[..4], [IGNORE_LABEL, IGNORE_LABEL, IGNORE_LABEL, 0]);
        assert!(matches!(
            window_features(&s, "a", 12.0, 1.0, 10.0, 0, HistoryPolicy::Drop),
            Err(Error::InsufficientHistory { deficit: 3, .. })
        ));
    }

    #[test]
    fn window_past_stream_end_is_an_error() {
        let s = stream(0.0, 10);
        assert!(matches!(
            window_features(&s, "a", 20.0, 1.0, 5.0, 0, HistoryPolicy::Pad),
            Err(Error::StreamTooShort { .. })
        ));
    }
}
