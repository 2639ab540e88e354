//! Reference implementations used only by tests. Each is written from the
//! behavioural description, not from the library code.
#![allow(dead_code)]

/// R/S-statistic Hurst estimate over dyadic block sizes 16..n/4.
pub fn rs_hurst(xs: &[f64]) -> f64 {
    let n = xs.len();
    let mut lx = Vec::new();
    let mut ly = Vec::new();
    let mut m = 16;
    while m <= n / 4 {
        let mut acc = 0.0;
        let mut cnt = 0.0;
        for c in xs.chunks_exact(m) {
            let mu = c.iter().sum::<f64>() / m as f64;
            let (mut y, mut lo, mut hi, mut ss) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
            for v in c {
                y += v - mu;
                lo = lo.min(y);
                hi = hi.max(y);
                ss += (v - mu) * (v - mu);
            }
            let s = (ss / m as f64).sqrt();
            if s > 0.0 {
                acc += (hi - lo) / s;
                cnt += 1.0;
            }
        }
        lx.push((m as f64).ln());
        ly.push((acc / cnt).ln());
        m *= 2;
    }
    slope(&lx, &ly)
}

pub fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceRun {
    pub served: u64,
    pub dropped: u64,
    /// Delay of every served packet, in service order, in slots.
    pub delays: Vec<u64>,
    pub queued: u64,
}

/// Single-class tail-drop FIFO. Service capacity through slot `t` is
/// `floor((t + 1) * net)`, which matches a carry accumulator exactly when
/// `net` is a dyadic rational.
pub fn reference_queue(arrivals: &[u64], net: f64, q_w: u64) -> ReferenceRun {
    let mut fifo: Vec<u64> = Vec::new();
    let mut head = 0usize;
    let mut served = 0u64;
    let mut dropped = 0u64;
    let mut delays = Vec::new();
    let mut capacity_used = 0u64;
    for (t, &a) in arrivals.iter().enumerate() {
        let capacity_total = ((t as f64 + 1.0) * net).floor() as u64;
        let mut this_slot = capacity_total - capacity_used;
        capacity_used = capacity_total;
        while this_slot > 0 && head < fifo.len() {
            delays.push(t as u64 - fifo[head]);
            head += 1;
            served += 1;
            this_slot -= 1;
        }
        for _ in 0..a {
            if ((fifo.len() - head) as u64) < q_w {
                fifo.push(t as u64);
            } else {
                dropped += 1;
            }
        }
    }
    ReferenceRun {
        served,
        dropped,
        delays,
        queued: (fifo.len() - head) as u64,
    }
}

/// Branch table transcribed condition by condition.
pub fn reference_cost(c: f64, h: f64, s: f64, p: f64, c0: f64) -> f64 {
    let b1 = h <= 0.5 && p < 0.6;
    let b2 = h > 0.5 && h < 0.9 && s <= 1.0 && p > 0.6;
    let b3 = h > 0.5 && h < 0.9 && s > 1.0 && s < 3.0 && p > 0.6;
    let b4 = (h >= 0.9 || (h > 0.5 && s >= 3.0)) && p > 0.6;
    assert!([b1, b2, b3, b4].iter().filter(|&&b| b).count() <= 1);
    if b1 {
        c
    } else if b2 {
        c + (h * c0 - 0.5 * c0)
    } else if b3 {
        c + (h * c0 - 0.5 * c0) * (s - 1.0)
    } else if b4 {
        c + c0
    } else {
        c
    }
}

/// Proptest settings without on-disk failure persistence, which has no
/// source file to anchor to in integration tests.
pub fn cases(n: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config {
        cases: n,
        failure_persistence: None,
        ..Default::default()
    }
}
