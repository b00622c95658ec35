/// Bytes per packed row.
pub fn row_bytes(cols: usize, bits: u8) -> usize {
    (cols * bits as usize).div_ceil(8)
}

/// Packs `rows × cols` codes row-major, LSB first within each byte, every
/// row padded to a byte boundary. Only the low `bits` of each code are kept.
pub fn pack_codes(codes: &[u8], rows: usize, cols: usize, bits: u8) -> Vec<u8> {
    assert_eq!(codes.len(), rows * cols, "code count disagrees with shape");
    let rb = row_bytes(cols, bits);
    let mut out = vec![0u8; rb * rows];
    let mask = ((1u16 << bits) - 1) as u8;
    for r in 0..rows {
        let dst = &mut out[r * rb..(r + 1) * rb];
        for (c, &code) in codes[r * cols..(r + 1) * cols].iter().enumerate() {
            let v = (code & mask) as u16;
            let bit = c * bits as usize;
            let (byte, shift) = (bit / 8, bit % 8);
            let spread = v << shift;
            dst[byte] |= spread as u8;
            if shift + bits as usize > 8 {
                dst[byte + 1] |= (spread >> 8) as u8;
            }
        }
    }
    out
}

/// Inverse of [`pack_codes`] for a range of rows.
pub fn unpack_rows(packed: &[u8], rows: std::ops::Range<usize>, cols: usize, bits: u8) -> Vec<u8> {
    let rb = row_bytes(cols, bits);
    let mask = (1u16 << bits) - 1;
    let mut out = Vec::with_capacity(rows.len() * cols);
    for r in rows {
        let src = &packed[r * rb..(r + 1) * rb];
        for c in 0..cols {
            let bit = c * bits as usize;
            let (byte, shift) = (bit / 8, bit % 8);
            let mut v = src[byte] as u16;
            if shift + bits as usize > 8 {
                v |= (src[byte + 1] as u16) << 8;
            }
            out.push(((v >> shift) & mask) as u8);
        }
    }
    out
}

pub fn unpack_codes(packed: &[u8], rows: usize, cols: usize, bits: u8) -> Vec<u8> {
    unpack_rows(packed, 0..rows, cols, bits)
}
