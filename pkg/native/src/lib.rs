//! Byte-oriented range coder with carry propagation, bit-exact with the
//! pure-Python reference coder it accelerates.
//!
//! State: 32-bit range, 64-bit low accumulator, pending-0xFF cache so
//! carries propagate into already-emitted bytes. CDF tables are quantized
//! to 16 bits (total mass exactly 65536) and the interval remainder goes to
//! the top symbol. The first output byte is always 0x00 and flushing emits
//! five bytes; an empty stream is exactly five zero bytes.

const PRECISION: u32 = 16;
const TOTAL: u32 = 1 << PRECISION;
const TOP: u32 = 1 << 24;

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder { low: 0, range: u32::MAX, cache: 0, cache_size: 1, out: Vec::new() }
    }

    pub fn encode(&mut self, cum_lo: u32, cum_hi: u32) {
        let r = self.range >> PRECISION;
        self.low += (r as u64) * (cum_lo as u64);
        if cum_hi == TOTAL {
            self.range -= r * cum_lo;
        } else {
            self.range = r * (cum_hi - cum_lo);
        }
        while self.range < TOP {
            self.shift_low();
            self.range <<= 8;
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || self.low > u32::MAX as u64 {
            let carry = (self.low >> 32) as u8;
            let mut b = self.cache;
            loop {
                self.out.push(b.wrapping_add(carry));
                b = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low << 8) & 0xFFFF_FFFF;
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    range: u32,
    code: u32,
}

#[derive(Debug, PartialEq, Eq)]
pub enum DecodeError {
    Truncated,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self, DecodeError> {
        let mut d = RangeDecoder { data, pos: 0, range: u32::MAX, code: 0 };
        d.read_byte()?; // leading cache byte
        for _ in 0..4 {
            d.code = (d.code << 8) | d.read_byte()? as u32;
        }
        Ok(d)
    }

    fn read_byte(&mut self) -> Result<u8, DecodeError> {
        if self.pos >= self.data.len() {
            return Err(DecodeError::Truncated);
        }
        let b = self.data[self.pos];
        self.pos += 1;
        Ok(b)
    }

    pub fn decode_target(&self) -> u32 {
        let r = self.range >> PRECISION;
        (self.code / r).min(TOTAL - 1)
    }

    pub fn decode_update(&mut self, cum_lo: u32, cum_hi: u32) -> Result<(), DecodeError> {
        let r = self.range >> PRECISION;
        self.code -= r * cum_lo;
        if cum_hi == TOTAL {
            self.range -= r * cum_lo;
        } else {
            self.range = r * (cum_hi - cum_lo);
        }
        while self.range < TOP {
            self.code = (self.code << 8) | self.read_byte()? as u32;
            self.range <<= 8;
        }
        Ok(())
    }
}

/// One quantized CDF table (cdf[0] == 0, cdf[last] == 65536, non-decreasing).
fn valid_cdf(cdf: &[u32]) -> bool {
    cdf.len() >= 2
        && cdf[0] == 0
        && *cdf.last().unwrap() == TOTAL
        && cdf.windows(2).all(|w| w[0] <= w[1])
}

struct Tables<'a> {
    flat: &'a [u32],
    starts: &'a [u32],
    lens: &'a [u32],
}

impl<'a> Tables<'a> {
    fn get(&self, id: usize) -> Option<&'a [u32]> {
        if id >= self.lens.len() {
            return None;
        }
        let start = self.starts[id] as usize;
        let len = self.lens[id] as usize;
        self.flat.get(start..start + len)
    }
}

pub fn encode_symbols(symbols: &[i64], ids: &[u32], tables: &[&[u32]]) -> Result<Vec<u8>, ()> {
    for t in tables {
        if !valid_cdf(t) {
            return Err(());
        }
    }
    let mut enc = RangeEncoder::new();
    for (&s, &id) in symbols.iter().zip(ids) {
        let cdf = *tables.get(id as usize).ok_or(())?;
        if s < 0 || (s as usize) + 1 >= cdf.len() {
            return Err(());
        }
        let (lo, hi) = (cdf[s as usize], cdf[s as usize + 1]);
        if lo == hi {
            return Err(());
        }
        enc.encode(lo, hi);
    }
    Ok(enc.finish())
}

pub fn decode_symbols(data: &[u8], ids: &[u32], tables: &[&[u32]]) -> Result<Vec<i64>, DecodeError> {
    let mut out = Vec::with_capacity(ids.len());
    if ids.is_empty() {
        if data.len() < 5 {
            return Err(DecodeError::Truncated);
        }
        return Ok(out);
    }
    let mut dec = RangeDecoder::new(data)?;
    for &id in ids {
        let cdf = tables[id as usize];
        let target = dec.decode_target();
        // highest s with cdf[s] <= target
        let s = match cdf.binary_search(&target) {
            Ok(mut i) => {
                while i + 1 < cdf.len() && cdf[i + 1] == target {
                    i += 1;
                }
                i
            }
            Err(i) => i - 1,
        };
        dec.decode_update(cdf[s], cdf[s + 1])?;
        out.push(s as i64);
    }
    Ok(out)
}

// ---- C ABI (consumed by the Python ctypes shim) ----
// Return codes: >= 0 ok (encode: bytes written), -1 contract violation,
// -2 output capacity exceeded, -3 truncated stream.

/// # Safety
/// All pointers must reference buffers of the advertised lengths.
#[no_mangle]
pub unsafe extern "C" fn rc_encode(
    symbols: *const i64,
    ids: *const u32,
    n: usize,
    cdf_flat: *const u32,
    cdf_starts: *const u32,
    cdf_lens: *const u32,
    n_tables: usize,
    out: *mut u8,
    cap: usize,
) -> i64 {
    let symbols = std::slice::from_raw_parts(symbols, n);
    let ids = std::slice::from_raw_parts(ids, n);
    let total_len: usize = std::slice::from_raw_parts(cdf_lens, n_tables)
        .iter()
        .map(|&l| l as usize)
        .sum();
    let tables = Tables {
        flat: std::slice::from_raw_parts(cdf_flat, total_len),
        starts: std::slice::from_raw_parts(cdf_starts, n_tables),
        lens: std::slice::from_raw_parts(cdf_lens, n_tables),
    };
    let mut views: Vec<&[u32]> = Vec::with_capacity(n_tables);
    for id in 0..n_tables {
        match tables.get(id) {
            Some(t) => views.push(t),
            None => return -1,
        }
    }
    match encode_symbols(symbols, ids, &views) {
        Ok(bytes) => {
            if bytes.len() > cap {
                return -2;
            }
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), out, bytes.len());
            bytes.len() as i64
        }
        Err(()) => -1,
    }
}

/// # Safety
/// All pointers must reference buffers of the advertised lengths;
/// `out_symbols` must hold `n` entries.
#[no_mangle]
pub unsafe extern "C" fn rc_decode(
    data: *const u8,
    data_len: usize,
    ids: *const u32,
    n: usize,
    cdf_flat: *const u32,
    cdf_starts: *const u32,
    cdf_lens: *const u32,
    n_tables: usize,
    out_symbols: *mut i64,
) -> i64 {
    let data = std::slice::from_raw_parts(data, data_len);
    let ids = std::slice::from_raw_parts(ids, n);
    let total_len: usize = std::slice::from_raw_parts(cdf_lens, n_tables)
        .iter()
        .map(|&l| l as usize)
        .sum();
    let tables = Tables {
        flat: std::slice::from_raw_parts(cdf_flat, total_len),
        starts: std::slice::from_raw_parts(cdf_starts, n_tables),
        lens: std::slice::from_raw_parts(cdf_lens, n_tables),
    };
    let mut views: Vec<&[u32]> = Vec::with_capacity(n_tables);
    for id in 0..n_tables {
        match tables.get(id) {
            Some(t) => {
                if !valid_cdf(t) {
                    return -1;
                }
                views.push(t);
            }
            None => return -1,
        }
    }
    if ids.iter().any(|&id| id as usize >= n_tables) {
        return -1;
    }
    match decode_symbols(data, ids, &views) {
        Ok(symbols) => {
            std::ptr::copy_nonoverlapping(symbols.as_ptr(), out_symbols, symbols.len());
            0
        }
        Err(DecodeError::Truncated) => -3,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct XorShift(u64);

    impl XorShift {
        fn next(&mut self) -> u64 {
            let mut x = self.0;
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            self.0 = x;
            x
        }

        fn below(&mut self, n: u64) -> u64 {
            self.next() % n
        }
    }

    /// Valid quantized CDF from arbitrary positive weights.
    fn make_cdf(weights: &[u64]) -> Vec<u32> {
        let total: u64 = weights.iter().sum();
        let mut freqs: Vec<u64> = weights
            .iter()
            .map(|&w| ((w * (TOTAL as u64)) / total).max(1))
            .collect();
        let mut drift = TOTAL as i64 - freqs.iter().sum::<u64>() as i64;
        while drift != 0 {
            let idx = freqs
                .iter()
                .enumerate()
                .max_by_key(|(_, &f)| f)
                .map(|(i, _)| i)
                .unwrap();
            if drift > 0 {
                freqs[idx] += 1;
                drift -= 1;
            } else if freqs[idx] > 1 {
                freqs[idx] -= 1;
                drift += 1;
            } else {
                panic!("cannot settle drift");
            }
        }
        let mut cdf = vec![0u32];
        for f in freqs {
            cdf.push(cdf.last().unwrap() + f as u32);
        }
        cdf
    }

    #[test]
    fn empty_stream_is_five_zero_bytes() {
        let cdf = make_cdf(&[1, 1]);
        let blob = encode_symbols(&[], &[], &[&cdf]).unwrap();
        assert_eq!(blob, vec![0u8; 5]);
        assert!(decode_symbols(&blob, &[], &[&cdf]).unwrap().is_empty());
    }

    // Golden vectors frozen from the reference coder (tests/fixtures in the
    // Python package); byte identity here is the cross-implementation gate.
    #[test]
    fn golden_binary8() {
        let cdf: Vec<u32> = vec![0, 32768, 65536];
        let symbols = [0i64, 1, 1, 0, 1, 0, 0, 1];
        let ids = [0u32; 8];
        let blob = encode_symbols(&symbols, &ids, &[&cdf]).unwrap();
        assert_eq!(blob, hex("0068ff8000"));
        assert_eq!(decode_symbols(&blob, &ids, &[&cdf]).unwrap(), symbols);
    }

    #[test]
    fn golden_skewed_run() {
        // exact table the reference implementation derives from
        // pmf [0.9, 0.05, 0.03, 0.02]
        let cdf: Vec<u32> = vec![0, 58982, 62259, 64225, 65536];
        let mut symbols = vec![0i64; 20];
        symbols.extend_from_slice(&[1, 2, 3, 0, 0, 1]);
        let ids = vec![0u32; symbols.len()];
        let blob = encode_symbols(&symbols, &ids, &[&cdf]).unwrap();
        assert_eq!(blob, hex("001d849fd9a8d4"));
        assert_eq!(decode_symbols(&blob, &ids, &[&cdf]).unwrap(), symbols);
    }

    #[test]
    fn round_trip_fuzz() {
        let mut rng = XorShift(0x9E3779B97F4A7C15);
        for _ in 0..2000 {
            let n_sym = 2 + rng.below(62) as usize;
            let weights: Vec<u64> = (0..n_sym).map(|_| 1 + rng.below(1000)).collect();
            let cdf = make_cdf(&weights);
            let n = rng.below(150) as usize;
            let symbols: Vec<i64> = (0..n).map(|_| rng.below(n_sym as u64) as i64).collect();
            let ids = vec![0u32; n];
            let blob = encode_symbols(&symbols, &ids, &[&cdf]).unwrap();
            assert_eq!(decode_symbols(&blob, &ids, &[&cdf]).unwrap(), symbols);
        }
    }

    #[test]
    fn multi_table_round_trip() {
        let mut rng = XorShift(42);
        let cdfs: Vec<Vec<u32>> = (0..5)
            .map(|_| {
                let n = 2 + rng.below(30) as usize;
                make_cdf(&(0..n).map(|_| 1 + rng.below(500)).collect::<Vec<_>>())
            })
            .collect();
        let views: Vec<&[u32]> = cdfs.iter().map(|c| c.as_slice()).collect();
        let n = 3000;
        let ids: Vec<u32> = (0..n).map(|_| rng.below(5) as u32).collect();
        let symbols: Vec<i64> = ids
            .iter()
            .map(|&id| rng.below((cdfs[id as usize].len() - 1) as u64) as i64)
            .collect();
        let blob = encode_symbols(&symbols, &ids, &views).unwrap();
        assert_eq!(decode_symbols(&blob, &ids, &views).unwrap(), symbols);
    }

    #[test]
    fn truncated_stream_is_reported() {
        let cdf = make_cdf(&[1, 1, 1, 1]);
        let symbols = vec![1i64; 100];
        let ids = vec![0u32; 100];
        let blob = encode_symbols(&symbols, &ids, &[&cdf]).unwrap();
        let err = decode_symbols(&blob[..4], &ids, &[&cdf]).unwrap_err();
        assert_eq!(err, DecodeError::Truncated);
    }

    #[test]
    fn out_of_support_symbol_rejected() {
        let cdf = make_cdf(&[1, 1]);
        assert!(encode_symbols(&[5], &[0], &[&cdf]).is_err());
        assert!(encode_symbols(&[-1], &[0], &[&cdf]).is_err());
    }

    fn hex(s: &str) -> Vec<u8> {
        (0..s.len())
            .step_by(2)
            .map(|i| u8::from_str_radix(&s[i..i + 2], 16).unwrap())
            .collect()
    }
}
