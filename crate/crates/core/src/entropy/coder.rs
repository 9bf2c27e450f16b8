//! Bit-exact range coding of quantized latents.
//!
//! A carryless 32-bit low/range coder with byte-wise renormalization drives
//! per-channel frequency tables at 16-bit cumulative precision. Payloads are
//! framed as `u32 length | bytes | u32 CRC32`, so corruption surfaces as an
//! explicit checksum error instead of silently wrong symbols.

use super::density::FactorizedDensity;
use super::{LatentKind, QuantizedLatent, SUPPORT};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Cumulative precision: every channel's frequencies sum to this.
pub const TABLE_TOTAL: u32 = 1 << 16;

/// Symbols per latent channel: the integers in [-SUPPORT, SUPPORT].
pub const LATENT_SYMBOLS: usize = (2 * SUPPORT + 1) as usize;

const TOP: u32 = 1 << 24;
const BOT: u32 = 1 << 16;

/// CRC32 (reflected, polynomial 0xEDB88320) of `bytes`.
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

/// Per-channel integer frequency tables with strictly increasing cumulative
/// arrays summing to [`TABLE_TOTAL`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SymbolTable {
    channels: usize,
    n_symbols: usize,
    /// `channels` runs of `n_symbols + 1` cumulative counts, 0..=TABLE_TOTAL.
    cum: Vec<u32>,
}

impl SymbolTable {
    /// Build from explicit per-channel frequencies. Every frequency must be
    /// at least 1 and each channel must sum to exactly [`TABLE_TOTAL`].
    pub fn from_freqs(freqs: &[Vec<u32>]) -> Result<Self> {
        let channels = freqs.len();
        if channels == 0 {
            return Err(Error::invalid("symbol table", "no channels"));
        }
        let n_symbols = freqs[0].len();
        let mut cum = Vec::with_capacity(channels * (n_symbols + 1));
        for (ch, lane) in freqs.iter().enumerate() {
            if lane.len() != n_symbols {
                return Err(Error::invalid(
                    "symbol table",
                    format!("channel {ch} has {} symbols, expected {n_symbols}", lane.len()),
                ));
            }
            let mut acc = 0u32;
            cum.push(0);
            for (s, &f) in lane.iter().enumerate() {
                if f == 0 {
                    return Err(Error::invalid(
                        "symbol table",
                        format!("channel {ch} symbol {s} has zero frequency"),
                    ));
                }
                acc = acc.checked_add(f).ok_or_else(|| {
                    Error::invalid("symbol table", format!("channel {ch} overflows"))
                })?;
                cum.push(acc);
            }
            if acc != TABLE_TOTAL {
                return Err(Error::invalid(
                    "symbol table",
                    format!("channel {ch} sums to {acc}, expected {TABLE_TOTAL}"),
                ));
            }
        }
        Ok(SymbolTable {
            channels,
            n_symbols,
            cum,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn n_symbols(&self) -> usize {
        self.n_symbols
    }

    #[inline]
    fn lane(&self, ch: usize) -> &[u32] {
        &self.cum[ch * (self.n_symbols + 1)..(ch + 1) * (self.n_symbols + 1)]
    }

    pub fn freq(&self, ch: usize, symbol: usize) -> u32 {
        let lane = self.lane(ch);
        lane[symbol + 1] - lane[symbol]
    }

    pub fn cum(&self, ch: usize, symbol: usize) -> u32 {
        self.lane(ch)[symbol]
    }

    /// The symbol whose cumulative interval contains `v`.
    fn lookup(&self, ch: usize, v: u32) -> usize {
        let lane = self.lane(ch);
        match lane.binary_search(&v) {
            Ok(i) => i,           // cum strictly increasing: v == cum[i] starts symbol i
            Err(i) => i - 1,
        }
    }
}

/// Discretize a density into coder tables: frequencies proportional to the
/// interval probabilities, floored at 1, largest-remainder renormalized to
/// [`TABLE_TOTAL`]. A pure function of the density parameters.
pub fn build_symbol_table<T: Scalar>(density: &FactorizedDensity<T>) -> SymbolTable {
    let probs = density.interval_probs();
    let freqs: Vec<Vec<u32>> = probs.iter().map(|lane| quantize_freqs(lane)).collect();
    SymbolTable::from_freqs(&freqs).expect("derived tables are valid by construction")
}

/// Largest-remainder apportionment of `TABLE_TOTAL` counts with a floor of 1.
pub(crate) fn quantize_freqs(probs: &[f64]) -> Vec<u32> {
    let n = probs.len();
    assert!(n >= 1 && (n as u32) <= TABLE_TOTAL, "lane size");
    let total_p: f64 = probs.iter().map(|&p| p.max(0.0)).sum();
    if total_p <= 0.0 {
        // Degenerate lane: uniform.
        let base = TABLE_TOTAL / n as u32;
        let extra = (TABLE_TOTAL - base * n as u32) as usize;
        return (0..n)
            .map(|i| base + u32::from(i < extra))
            .collect();
    }
    let ideal: Vec<f64> = probs
        .iter()
        .map(|&p| p.max(0.0) / total_p * TABLE_TOTAL as f64)
        .collect();
    let mut freqs: Vec<u32> = ideal.iter().map(|&x| (x.floor() as u32).max(1)).collect();
    let mut sum: i64 = freqs.iter().map(|&f| f as i64).sum();

    if sum < TABLE_TOTAL as i64 {
        // Hand out the shortfall to the largest fractional remainders.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| {
            let ri = ideal[i] - ideal[i].floor();
            let rj = ideal[j] - ideal[j].floor();
            rj.partial_cmp(&ri).unwrap().then(i.cmp(&j))
        });
        let mut k = 0;
        while sum < TABLE_TOTAL as i64 {
            freqs[order[k % n]] += 1;
            sum += 1;
            k += 1;
        }
    } else if sum > TABLE_TOTAL as i64 {
        // Floors overshot: repeatedly take back from the biggest overshoot
        // while respecting the floor of 1.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| {
            let oi = freqs[i] as f64 - ideal[i];
            let oj = freqs[j] as f64 - ideal[j];
            oj.partial_cmp(&oi).unwrap().then(i.cmp(&j))
        });
        let mut k = 0;
        while sum > TABLE_TOTAL as i64 {
            let i = order[k % n];
            if freqs[i] > 1 {
                freqs[i] -= 1;
                sum -= 1;
            }
            k += 1;
        }
    }
    freqs
}

struct Encoder {
    low: u32,
    range: u32,
    out: Vec<u8>,
}

impl Encoder {
    fn new() -> Self {
        Encoder {
            low: 0,
            range: u32::MAX,
            out: Vec::new(),
        }
    }

    fn encode(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum + freq <= TABLE_TOTAL);
        self.range /= TABLE_TOTAL;
        self.low = self.low.wrapping_add(cum * self.range);
        self.range *= freq;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    fn finish(mut self) -> Vec<u8> {
        for _ in 0..4 {
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
        }
        self.out
    }
}

struct Decoder<'a> {
    low: u32,
    range: u32,
    code: u32,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        let mut d = Decoder {
            low: 0,
            range: u32::MAX,
            code: 0,
            bytes,
            pos: 0,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        d
    }

    #[inline]
    fn next_byte(&mut self) -> u8 {
        // Reads past the flushed tail are zeros; the CRC has already vouched
        // for the bytes that exist.
        let b = self.bytes.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    fn decode_freq(&mut self) -> u32 {
        self.range /= TABLE_TOTAL;
        (self.code.wrapping_sub(self.low) / self.range).min(TABLE_TOTAL - 1)
    }

    fn decode_update(&mut self, cum: u32, freq: u32) {
        self.low = self.low.wrapping_add(cum * self.range);
        self.range *= freq;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.code = (self.code << 8) | self.next_byte() as u32;
            self.low <<= 8;
            self.range <<= 8;
        }
    }
}

pub(crate) fn encode_symbols(symbols: &[(usize, usize)], table: &SymbolTable) -> Vec<u8> {
    if symbols.is_empty() {
        return Vec::new();
    }
    let mut enc = Encoder::new();
    for &(ch, s) in symbols {
        enc.encode(table.cum(ch, s), table.freq(ch, s));
    }
    enc.finish()
}

pub(crate) fn decode_symbols(
    bytes: &[u8],
    table: &SymbolTable,
    channel_of: impl Fn(usize) -> usize,
    count: usize,
) -> Vec<usize> {
    if count == 0 {
        return Vec::new();
    }
    let mut dec = Decoder::new(bytes);
    (0..count)
        .map(|i| {
            let ch = channel_of(i);
            let v = dec.decode_freq();
            let s = table.lookup(ch, v);
            dec.decode_update(table.cum(ch, s), table.freq(ch, s));
            s
        })
        .collect()
}

/// Encode a latent into a framed payload: `u32 length | bytes | u32 CRC32`.
pub fn range_encode(q: &QuantizedLatent, table: &SymbolTable) -> Result<Vec<u8>> {
    let (c, h, w) = q.extents();
    if c != table.channels() {
        return Err(Error::invalid(
            "range encode",
            format!("latent has {c} channels, table {}", table.channels()),
        ));
    }
    if table.n_symbols() != LATENT_SYMBOLS {
        return Err(Error::invalid(
            "range encode",
            format!(
                "table covers {} symbols, latents need {LATENT_SYMBOLS}",
                table.n_symbols()
            ),
        ));
    }
    let hw = h * w;
    let symbols: Vec<(usize, usize)> = q
        .values()
        .iter()
        .enumerate()
        .map(|(i, &v)| (i / hw, (v + SUPPORT) as usize))
        .collect();
    let body = encode_symbols(&symbols, table);
    let mut payload = Vec::with_capacity(body.len() + 8);
    payload.extend_from_slice(&(body.len() as u32).to_le_bytes());
    payload.extend_from_slice(&body);
    payload.extend_from_slice(&crc32(&body).to_le_bytes());
    Ok(payload)
}

/// Decode one framed payload from the front of `bytes`. Returns the latent
/// and how many bytes were consumed. `payload_name` labels errors.
pub fn range_decode(
    bytes: &[u8],
    table: &SymbolTable,
    kind: LatentKind,
    channels: usize,
    h: usize,
    w: usize,
    payload_name: &str,
) -> Result<(QuantizedLatent, usize)> {
    if channels != table.channels() || table.n_symbols() != LATENT_SYMBOLS {
        return Err(Error::invalid(
            "range decode",
            format!(
                "{payload_name}: table shape ({} channels, {} symbols) does not fit a {channels}-channel latent",
                table.channels(),
                table.n_symbols()
            ),
        ));
    }
    if bytes.len() < 4 {
        return Err(Error::invalid(
            "range decode",
            format!("{payload_name}: {} bytes left, need a 4-byte length", bytes.len()),
        ));
    }
    let len = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let need = 4 + len + 4;
    if bytes.len() < need {
        return Err(Error::invalid(
            "range decode",
            format!("{payload_name}: payload claims {len} bytes but only {} remain", bytes.len() - 4),
        ));
    }
    let body = &bytes[4..4 + len];
    let stored = u32::from_le_bytes(bytes[4 + len..need].try_into().unwrap());
    let computed = crc32(body);
    if stored != computed {
        return Err(Error::Checksum {
            payload: payload_name.to_string(),
            stored,
            computed,
        });
    }
    let hw = h * w;
    let indices = decode_symbols(body, table, |i| i / hw, channels * hw);
    let values: Vec<i32> = indices.iter().map(|&s| s as i32 - SUPPORT).collect();
    Ok((
        QuantizedLatent::from_parts(kind, channels, h, w, values),
        need,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_table(channels: usize, n: usize, rng: &mut StdRng) -> SymbolTable {
        let freqs: Vec<Vec<u32>> = (0..channels)
            .map(|_| {
                let mut lane = vec![1u32; n];
                let mut rest = TABLE_TOTAL - n as u32;
                while rest > 0 {
                    let i = rng.gen_range(0..n);
                    let grab = rng.gen_range(1..=rest.min(997));
                    lane[i] += grab;
                    rest -= grab;
                }
                lane
            })
            .collect();
        SymbolTable::from_freqs(&freqs).unwrap()
    }

    fn draw(table: &SymbolTable, ch: usize, rng: &mut StdRng) -> usize {
        table.lookup(ch, rng.gen_range(0..TABLE_TOTAL))
    }

    #[test]
    fn crc32_matches_the_standard_check_vector() {
        assert_eq!(crc32(b"123456789"), 0xCBF43926);
        assert_eq!(crc32(b""), 0);
    }

    #[test]
    fn empty_latent_is_header_and_checksum_only() {
        let mut rng = StdRng::seed_from_u64(0);
        let table = random_table(1, LATENT_SYMBOLS, &mut rng);
        let q = QuantizedLatent::from_parts(LatentKind::Residual, 1, 0, 4, vec![]);
        let payload = range_encode(&q, &table).unwrap();
        assert_eq!(payload.len(), 8);
        let (back, consumed) = range_decode(
            &payload,
            &table,
            LatentKind::Residual,
            1,
            0,
            4,
            "empty",
        )
        .unwrap();
        assert_eq!(consumed, 8);
        assert!(back.is_empty());
    }

    #[test]
    fn thousand_symbol_round_trips_over_100_seeds() {
        for seed in 0..100u64 {
            let mut rng = StdRng::seed_from_u64(seed);
            let channels = rng.gen_range(1..4usize);
            let table = random_table(channels, LATENT_SYMBOLS, &mut rng);
            let symbols: Vec<(usize, usize)> = (0..1000)
                .map(|i| {
                    let ch = i % channels;
                    (ch, draw(&table, ch, &mut rng))
                })
                .collect();
            let bytes = encode_symbols(&symbols, &table);
            let decoded = decode_symbols(&bytes, &table, |i| i % channels, 1000);
            let want: Vec<usize> = symbols.iter().map(|&(_, s)| s).collect();
            assert_eq!(decoded, want, "seed {seed}");
        }
    }

    #[test]
    fn latent_payload_round_trips_bit_exactly() {
        let mut rng = StdRng::seed_from_u64(7);
        let table = random_table(3, LATENT_SYMBOLS, &mut rng);
        let values: Vec<i32> = (0..3 * 8 * 8)
            .map(|_| rng.gen_range(-SUPPORT..=SUPPORT))
            .collect();
        let q = QuantizedLatent::from_parts(LatentKind::Motion, 3, 8, 8, values);
        let payload = range_encode(&q, &table).unwrap();
        let mut stream = payload.clone();
        stream.extend_from_slice(b"trailing-data");
        let (back, consumed) = range_decode(
            &stream,
            &table,
            LatentKind::Motion,
            3,
            8,
            8,
            "latent",
        )
        .unwrap();
        assert_eq!(consumed, payload.len());
        assert_eq!(back, q);
    }

    #[test]
    fn uniform_256_table_codes_at_8_bits_per_symbol() {
        let table = SymbolTable::from_freqs(&[vec![256u32; 256]]).unwrap();
        let mut rng = StdRng::seed_from_u64(3);
        let symbols: Vec<(usize, usize)> =
            (0..1024).map(|_| (0, rng.gen_range(0..256))).collect();
        let bytes = encode_symbols(&symbols, &table);
        assert!(
            bytes.len() <= 1024 + 8,
            "{} bytes for 1024 ideal",
            bytes.len()
        );
        let decoded = decode_symbols(&bytes, &table, |_| 0, 1024);
        let want: Vec<usize> = symbols.iter().map(|&(_, s)| s).collect();
        assert_eq!(decoded, want);
    }

    #[test]
    fn corrupted_payloads_fail_the_checksum() {
        let mut rng = StdRng::seed_from_u64(9);
        let table = random_table(1, LATENT_SYMBOLS, &mut rng);
        let values: Vec<i32> = (0..64).map(|_| rng.gen_range(-4..=4)).collect();
        let q = QuantizedLatent::from_parts(LatentKind::Intra, 1, 8, 8, values);
        let mut payload = range_encode(&q, &table).unwrap();
        let mid = payload.len() / 2;
        payload[mid] ^= 0x40;
        let err = range_decode(
            &payload,
            &table,
            LatentKind::Intra,
            1,
            8,
            8,
            "frame 5 residual",
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("frame 5 residual"), "unhelpful error: {msg}");
        assert!(matches!(err, Error::Checksum { .. }));
    }

    #[test]
    fn truncated_payloads_are_rejected_with_context() {
        let mut rng = StdRng::seed_from_u64(10);
        let table = random_table(1, LATENT_SYMBOLS, &mut rng);
        let q = QuantizedLatent::from_parts(LatentKind::Motion, 1, 2, 2, vec![0, 1, -1, 2]);
        let payload = range_encode(&q, &table).unwrap();
        let err = range_decode(
            &payload[..payload.len() - 6],
            &table,
            LatentKind::Motion,
            1,
            2,
            2,
            "frame 2 motion",
        )
        .unwrap_err();
        assert!(err.to_string().contains("frame 2 motion"));
    }

    #[test]
    fn largest_remainder_splits_a_uniform_3_symbol_lane_evenly() {
        // A support of [-1, 1]: three symbols sharing the mass equally.
        let freqs = quantize_freqs(&[1.0 / 3.0; 3]);
        let target = TABLE_TOTAL as f64 / 3.0;
        for (s, &f) in freqs.iter().enumerate() {
            assert!((f as f64 - target).abs() <= 1.0, "symbol {s}: {f}");
        }
        assert!(freqs.iter().all(|&f| f >= 1));
        assert_eq!(freqs.iter().sum::<u32>(), TABLE_TOTAL);
    }

    #[test]
    fn degenerate_mass_keeps_every_frequency_positive() {
        let mut probs = vec![0.0; LATENT_SYMBOLS];
        probs[0] = 1.0;
        let freqs = quantize_freqs(&probs);
        assert!(freqs.iter().all(|&f| f >= 1));
        assert_eq!(freqs.iter().sum::<u32>(), TABLE_TOTAL);
        assert!(freqs[0] > TABLE_TOTAL - 2 * LATENT_SYMBOLS as u32);
    }

    #[test]
    fn tables_are_pure_functions_of_the_density() {
        let mut rng = StdRng::seed_from_u64(11);
        let d = FactorizedDensity::<f32>::new(&mut rng, 2);
        assert_eq!(build_symbol_table(&d), build_symbol_table(&d));
    }

    #[test]
    fn coded_bits_track_the_differentiable_estimate() {
        // 10^4 symbols drawn from the table distribution: actual payload
        // bits within 2% + 64 bits of the model's estimate.
        let mut rng = StdRng::seed_from_u64(12);
        let d = FactorizedDensity::<f64>::new(&mut rng, 2);
        let table = build_symbol_table(&d);
        let (h, w) = (50, 100);
        let values: Vec<i32> = (0..2 * h * w)
            .map(|i| draw(&table, i / (h * w), &mut rng) as i32 - SUPPORT)
            .collect();
        let q = QuantizedLatent::from_parts(LatentKind::Residual, 2, h, w, values);
        let payload = range_encode(&q, &table).unwrap();
        let actual_bits = (payload.len() as f64 - 8.0) * 8.0;
        let estimate = d.estimate_bits(&q.to_tensor::<f64>());
        let tol = 0.02 * estimate + 64.0;
        assert!(
            (actual_bits - estimate).abs() < tol,
            "actual {actual_bits} vs estimate {estimate} (tol {tol})"
        );
    }
}
