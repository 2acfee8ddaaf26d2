//! Deterministic bandwidth/latency model and per-paradigm transfer
//! arithmetic.
//!
//! A transfer costs `per_message_overhead + propagation_delay +
//! bytes/bandwidth + jitter_draw`. Paradigm reports use tensor payload bytes
//! for the headline figures and itemize framing bytes separately, so the raw
//! bandwidth arithmetic stays visible next to any overhead assumptions.

use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::wire::HEADER_LEN;

/// Bytes per second for a 1 Gbit/s link.
pub const GIGABIT_BYTES_PER_SEC: f64 = 125_000_000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelModel {
    pub bandwidth_bytes_per_sec: f64,
    pub propagation_delay_s: f64,
    pub per_message_overhead_s: f64,
    pub jitter_s: f64,
}

impl ChannelModel {
    /// Ideal gigabit link: no overhead, no delay, no jitter.
    pub fn gigabit() -> Self {
        ChannelModel {
            bandwidth_bytes_per_sec: GIGABIT_BYTES_PER_SEC,
            propagation_delay_s: 0.0,
            per_message_overhead_s: 0.0,
            jitter_s: 0.0,
        }
    }

    /// Config-file units: bandwidth in bits/s, delays in milliseconds.
    pub fn from_config(
        bandwidth_bits_per_sec: f64,
        propagation_delay_ms: f64,
        per_message_overhead_ms: f64,
        jitter_ms: f64,
    ) -> Self {
        ChannelModel {
            bandwidth_bytes_per_sec: bandwidth_bits_per_sec / 8.0,
            propagation_delay_s: propagation_delay_ms / 1000.0,
            per_message_overhead_s: per_message_overhead_ms / 1000.0,
            jitter_s: jitter_ms / 1000.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.bandwidth_bytes_per_sec > 0.0) {
            return Err(format!(
                "bandwidth must be positive, got {}",
                self.bandwidth_bytes_per_sec
            ));
        }
        for (name, v) in [
            ("propagation_delay_s", self.propagation_delay_s),
            ("per_message_overhead_s", self.per_message_overhead_s),
            ("jitter_s", self.jitter_s),
        ] {
            if !(v >= 0.0) {
                return Err(format!("{name} must be non-negative, got {v}"));
            }
        }
        Ok(())
    }
}

/// Seconds to move `bytes` across one message on `ch`. Deterministic when
/// jitter is zero (the rng is not consumed).
pub fn simulate_transfer(bytes: u64, ch: &ChannelModel, rng: &mut Rng) -> f64 {
    let jitter = if ch.jitter_s > 0.0 {
        rng.next_f64() * ch.jitter_s
    } else {
        0.0
    };
    ch.per_message_overhead_s
        + ch.propagation_delay_s
        + bytes as f64 / ch.bandwidth_bytes_per_sec
        + jitter
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Paradigm {
    /// Local-only: the whole model runs on the device, nothing crosses the
    /// network.
    Loc,
    /// Remote-only: raw inputs ship to the server.
    Roc,
    /// Split: the flattened shared feature ships to the server.
    Sc,
}

impl Paradigm {
    pub fn name(&self) -> &'static str {
        match self {
            Paradigm::Loc => "LoC",
            Paradigm::Roc => "RoC",
            Paradigm::Sc => "SC",
        }
    }
}

impl std::str::FromStr for Paradigm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "loc" => Ok(Paradigm::Loc),
            "roc" => Ok(Paradigm::Roc),
            "sc" => Ok(Paradigm::Sc),
            other => Err(format!("unknown paradigm {other:?} (expected loc|roc|sc)")),
        }
    }
}

/// Transfer-time breakdown for a workload of `n_inputs` inferences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub paradigm: Paradigm,
    pub n_inputs: u64,
    /// Tensor bytes per request (input pixels for RoC, feature for SC).
    pub request_payload_bytes: u64,
    /// Logit bytes per response.
    pub response_payload_bytes: u64,
    /// Frame header/metadata bytes per request+response exchange.
    pub framing_bytes_per_exchange: u64,
    /// Payload-only times over the channel.
    pub request_seconds: f64,
    pub response_seconds: f64,
    /// Extra seconds if the framing bytes are charged too.
    pub framing_seconds: f64,
    pub total_seconds: f64,
}

impl TransferReport {
    /// Payload-only request+response time.
    pub fn payload_seconds(&self) -> f64 {
        self.request_seconds + self.response_seconds
    }
}

/// Per-message overhead that would stretch `n` payload transfers from
/// `payload_seconds` to `target_seconds`.
pub fn overhead_per_message_to_reach(target_seconds: f64, payload_seconds: f64, n: u64) -> f64 {
    (target_seconds - payload_seconds) / n as f64
}

/// Tensor payload bytes of one raw `[w,h,c]` f32 input.
pub fn input_payload_bytes(input_shape: (usize, usize, usize)) -> u64 {
    let (w, h, c) = input_shape;
    4 * (w as u64) * (h as u64) * (c as u64)
}

/// Logit payload bytes of one prediction response.
pub fn response_payload_bytes(task_classes: &[u16]) -> u64 {
    task_classes.iter().map(|&c| 4 * u64::from(c)).sum()
}

/// Transfer times for one paradigm over `n_inputs` request/response
/// exchanges. LoC moves nothing and costs nothing.
pub fn transfer_time_report(
    paradigm: Paradigm,
    n_inputs: u64,
    input_shape: (usize, usize, usize),
    feature_len: u64,
    task_classes: &[u16],
    ch: &ChannelModel,
    rng: &mut Rng,
) -> TransferReport {
    if paradigm == Paradigm::Loc {
        return TransferReport {
            paradigm,
            n_inputs,
            request_payload_bytes: 0,
            response_payload_bytes: 0,
            framing_bytes_per_exchange: 0,
            request_seconds: 0.0,
            response_seconds: 0.0,
            framing_seconds: 0.0,
            total_seconds: 0.0,
        };
    }

    let (request_payload, request_rank) = match paradigm {
        Paradigm::Roc => (input_payload_bytes(input_shape), 3u64),
        Paradigm::Sc => (4 * feature_len, 1u64),
        Paradigm::Loc => unreachable!(),
    };
    let response_payload = response_payload_bytes(task_classes);
    // Request framing: header + ndims + dims + dtype. Response framing:
    // header + task count + per-task id and class-count fields.
    let request_framing = HEADER_LEN as u64 + 1 + 4 * request_rank + 1;
    let response_framing = HEADER_LEN as u64 + 1 + 3 * task_classes.len() as u64;

    let mut request_seconds = 0.0;
    let mut response_seconds = 0.0;
    let mut framing_seconds = 0.0;
    for _ in 0..n_inputs {
        request_seconds += simulate_transfer(request_payload, ch, rng);
        response_seconds += simulate_transfer(response_payload, ch, rng);
    }
    // Framing bytes ride the same messages; charge bandwidth only.
    framing_seconds +=
        n_inputs as f64 * (request_framing + response_framing) as f64 / ch.bandwidth_bytes_per_sec;

    TransferReport {
        paradigm,
        n_inputs,
        request_payload_bytes: request_payload,
        response_payload_bytes: response_payload,
        framing_bytes_per_exchange: request_framing + response_framing,
        request_seconds,
        response_seconds,
        framing_seconds,
        total_seconds: request_seconds + response_seconds + framing_seconds,
    }
}
