//! Window machinery: partition/reverse rearrangements, the shifted-window
//! attention mask, and window-local multi-head attention with relative
//! position bias.

use super::SwinError;
use crate::nn::{Initializer, MultiHeadAttention, NamedParams};
use crate::tensor::{Scalar, Tensor};

/// Rearrange `(B, H, W, C)` into non-overlapping `window x window` tiles:
/// `(B * H/window * W/window, window, window, C)`. Lossless.
pub fn window_partition<E: Scalar>(
    x: &Tensor<E>,
    window: usize,
) -> Result<Tensor<E>, SwinError> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(SwinError::NotAnImageGrid {
            shape: s.to_vec(),
        });
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(SwinError::WindowIndivisible {
            height: h,
            width: w,
            window,
        });
    }
    let (nh, nw) = (h / window, w / window);
    let out = x
        .reshape(&[b, nh, window, nw, window, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b * nh * nw, window, window, c])?;
    Ok(out)
}

/// Exact inverse of [`window_partition`]: `(B * H/window * W/window, window,
/// window, C)` back to `(B, H, W, C)`.
pub fn window_reverse<E: Scalar>(
    wins: &Tensor<E>,
    window: usize,
    height: usize,
    width: usize,
) -> Result<Tensor<E>, SwinError> {
    let s = wins.shape();
    let consistent = s.len() == 4 && s[1] == window && s[2] == window;
    if !consistent {
        return Err(SwinError::WindowCountMismatch {
            windows: s.to_vec(),
            window,
            height,
            width,
        });
    }
    if window == 0 || height % window != 0 || width % window != 0 {
        return Err(SwinError::WindowIndivisible {
            height,
            width,
            window,
        });
    }
    let (nh, nw) = (height / window, width / window);
    let per_image = nh * nw;
    if per_image == 0 || s[0] % per_image != 0 {
        return Err(SwinError::WindowCountMismatch {
            windows: s.to_vec(),
            window,
            height,
            width,
        });
    }
    let b = s[0] / per_image;
    let c = s[3];
    let out = wins
        .reshape(&[b, nh, nw, window, window, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b, height, width, c])?;
    Ok(out)
}

/// Additive attention mask for the cyclic-shifted window layout, shape
/// `(num_windows, window², window²)`: 0 where two positions of a window
/// originate from the same contiguous image region, -1e9 where they were
/// brought together by the wrap-around and must not attend.
pub fn shifted_window_mask<E: Scalar>(
    height: usize,
    width: usize,
    window: usize,
    shift: usize,
) -> Result<Tensor<E>, SwinError> {
    if window == 0 || height % window != 0 || width % window != 0 {
        return Err(SwinError::WindowIndivisible {
            height,
            width,
            window,
        });
    }
    if shift >= window {
        return Err(SwinError::ShiftTooLarge { shift, window });
    }
    let n = window * window;
    let num_windows = (height / window) * (width / window);
    if shift == 0 {
        return Ok(Tensor::zeros(&[num_windows, n, n]));
    }
    // Label each grid cell with its region id; regions are the three slices
    // per axis that a cyclic shift by `shift` creates.
    let slices = |len: usize| [(0, len - window), (len - window, len - shift), (len - shift, len)];
    let mut ids = vec![0u32; height * width];
    let mut next = 0u32;
    for (ys, ye) in slices(height) {
        for (xs, xe) in slices(width) {
            for y in ys..ye {
                for x in xs..xe {
                    ids[y * width + x] = next;
                }
            }
            next += 1;
        }
    }
    // Gather ids per window in partition order, then compare pairwise.
    let neg = E::from_f64(-1e9);
    let mut data = vec![E::zero(); num_windows * n * n];
    let (nh, nw) = (height / window, width / window);
    let mut win_ids = vec![0u32; n];
    for wy in 0..nh {
        for wx in 0..nw {
            let p = wy * nw + wx;
            for iy in 0..window {
                for ix in 0..window {
                    win_ids[iy * window + ix] = ids[(wy * window + iy) * width + wx * window + ix];
                }
            }
            for i in 0..n {
                for j in 0..n {
                    if win_ids[i] != win_ids[j] {
                        data[(p * n + i) * n + j] = neg;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(data, &[num_windows, n, n]).expect("mask shape is self-consistent"))
}

/// Tile a `(nW, N, N)` mask across heads into `(nW, heads, N, N)` so it can
/// suffix-broadcast onto `(B, nW, heads, N, N)` attention logits.
pub fn tile_mask_heads<E: Scalar>(mask: &Tensor<E>, heads: usize) -> Tensor<E> {
    let s = mask.shape();
    let (nw, n) = (s[0], s[1]);
    let src = mask.data();
    let mut data = Vec::with_capacity(nw * heads * n * n);
    for p in 0..nw {
        let plane = &src[p * n * n..(p + 1) * n * n];
        for _ in 0..heads {
            data.extend_from_slice(plane);
        }
    }
    drop(src);
    Tensor::from_vec(data, &[nw, heads, n, n]).expect("tiled mask shape is self-consistent")
}

/// Multi-head attention inside each window with a learned relative-position
/// bias: a `((2w-1)², heads)` table indexed by the coordinate delta between
/// query and key positions.
pub struct WindowAttention<E: Scalar> {
    mha: MultiHeadAttention<E>,
    bias_table: Tensor<E>,
    rel_index: Vec<usize>,
    window: usize,
    heads: usize,
}

impl<E: Scalar> WindowAttention<E> {
    pub fn new(
        dim: usize,
        heads: usize,
        window: usize,
        init: &mut Initializer,
    ) -> Result<Self, SwinError> {
        if heads == 0 || dim % heads != 0 {
            return Err(SwinError::HeadsIndivisible { dim, heads });
        }
        let span = 2 * window - 1;
        let n = window * window;
        let mut rel_index = Vec::with_capacity(n * n);
        for qy in 0..window {
            for qx in 0..window {
                for ky in 0..window {
                    for kx in 0..window {
                        let dy = qy + window - 1 - ky;
                        let dx = qx + window - 1 - kx;
                        rel_index.push(dy * span + dx);
                    }
                }
            }
        }
        Ok(WindowAttention {
            mha: MultiHeadAttention::new(dim, heads, init)
                .map_err(|_| SwinError::HeadsIndivisible { dim, heads })?,
            bias_table: init.zeros(&[span * span, heads]),
            rel_index,
            window,
            heads,
        })
    }

    /// Current relative-position bias, shape `(heads, N, N)`.
    fn bias(&self) -> crate::tensor::Result<Tensor<E>> {
        let n = self.window * self.window;
        self.bias_table
            .gather_rows(&self.rel_index)? // (N², heads)
            .reshape(&[n, n, self.heads])?
            .permute(&[2, 0, 1])
    }

    /// `x` is `(B, nW, N, C)` with `N = window²`; the optional mask is
    /// `(nW, heads, N, N)`. Returns the output and the attention weights
    /// `(B, nW, heads, N, N)`.
    pub fn forward(
        &self,
        x: &Tensor<E>,
        mask: Option<&Tensor<E>>,
    ) -> Result<(Tensor<E>, Tensor<E>), SwinError> {
        let bias = self.bias()?;
        let mut extras: Vec<&Tensor<E>> = vec![&bias];
        if let Some(m) = mask {
            extras.push(m);
        }
        Ok(self.mha.forward_with_weights(x, &extras)?)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut NamedParams<E>) {
        self.mha.collect_params(prefix, out);
        out.push((format!("{prefix}.bias_table"), self.bias_table.clone()));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Initializer;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn grid(b: usize, h: usize, w: usize, c: usize) -> Tensor<f64> {
        let n = b * h * w * c;
        Tensor::from_vec((0..n).map(|v| v as f64).collect(), &[b, h, w, c]).unwrap()
    }

    #[test]
    fn partition_counts_windows() {
        let x = grid(1, 8, 8, 2);
        let wins = window_partition(&x, 4).unwrap();
        assert_eq!(wins.shape(), &[4, 4, 4, 2]);
    }

    #[test]
    fn single_window_partition_is_identity_data() {
        let x = grid(1, 4, 4, 3);
        let wins = window_partition(&x, 4).unwrap();
        assert_eq!(wins.to_vec(), x.to_vec());
    }

    #[test]
    fn partition_rejects_indivisible() {
        let x = grid(1, 6, 8, 1);
        assert!(matches!(
            window_partition(&x, 4),
            Err(SwinError::WindowIndivisible { .. })
        ));
    }

    #[test]
    fn reverse_rejects_inconsistent_count() {
        let wins = grid(3, 4, 4, 1); // 3 windows cannot tile an 8x8 grid
        assert!(matches!(
            window_reverse(&wins, 4, 8, 8),
            Err(SwinError::WindowCountMismatch { .. })
        ));
    }

    #[test]
    fn permuted_windows_differ_from_original() {
        let x = grid(1, 8, 4, 1);
        let wins = window_partition(&x, 4).unwrap(); // 2 windows
        let swapped = Tensor::concat(
            &[&wins.slice(0, 1, 1).unwrap(), &wins.slice(0, 0, 1).unwrap()],
            0,
        )
        .unwrap();
        let back = window_reverse(&swapped, 4, 8, 4).unwrap();
        assert_ne!(back.to_vec(), x.to_vec());
        let identity = window_reverse(&wins, 4, 8, 4).unwrap();
        assert_eq!(identity.to_vec(), x.to_vec());
    }

    proptest! {
        #[test]
        fn partition_reverse_roundtrip(
            b in 1usize..3,
            tiles_h in 1usize..4,
            tiles_w in 1usize..4,
            window in 1usize..5,
            c in 1usize..4,
            seed in any::<u64>(),
        ) {
            let h = tiles_h * window;
            let w = tiles_w * window;
            let n = b * h * w * c;
            let mut state = seed;
            let data: Vec<f64> = (0..n).map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
                (state >> 11) as f64
            }).collect();
            let x = Tensor::from_vec(data, &[b, h, w, c]).unwrap();
            let back = window_reverse(&window_partition(&x, window).unwrap(), window, h, w).unwrap();
            prop_assert_eq!(back.to_vec(), x.to_vec());
        }
    }

    #[test]
    fn zero_shift_mask_is_all_zero() {
        let m = shifted_window_mask::<f64>(8, 8, 4, 0).unwrap();
        assert_eq!(m.shape(), &[4, 16, 16]);
        assert!(m.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_window_grid_still_partitions_regions() {
        let m = shifted_window_mask::<f64>(4, 4, 4, 2).unwrap();
        assert_eq!(m.shape(), &[1, 16, 16]);
        let v = m.to_vec();
        assert!(v.iter().any(|&x| x == -1e9));
        assert!(v.iter().any(|&x| x == 0.0));
    }

    /// Independent oracle: in the rolled layout, position `y` (or `x`) holds
    /// content that wrapped around iff `y + shift >= len`. Two positions in
    /// the same window may attend iff their wrap status agrees on both axes.
    fn oracle_may_attend(
        height: usize,
        width: usize,
        shift: usize,
        a: (usize, usize),
        b: (usize, usize),
    ) -> bool {
        let wrapped_y = |y: usize| y + shift >= height;
        let wrapped_x = |x: usize| x + shift >= width;
        wrapped_y(a.0) == wrapped_y(b.0) && wrapped_x(a.1) == wrapped_x(b.1)
    }

    #[test]
    fn mask_matches_wraparound_oracle_exhaustively() {
        for window in 1usize..=4 {
            for th in 1..=3usize {
                for tw in 1..=3usize {
                    let (h, w) = (th * window, tw * window);
                    if h > 12 || w > 12 {
                        continue;
                    }
                    for shift in 0..window {
                        let mask = shifted_window_mask::<f64>(h, w, window, shift).unwrap();
                        let data = mask.to_vec();
                        let n = window * window;
                        let (nh, nw) = (h / window, w / window);
                        for wy in 0..nh {
                            for wx in 0..nw {
                                let p = wy * nw + wx;
                                for i in 0..n {
                                    for j in 0..n {
                                        let ai = (wy * window + i / window, wx * window + i % window);
                                        let aj = (wy * window + j / window, wx * window + j % window);
                                        let allowed = shift == 0 || oracle_may_attend(h, w, shift, ai, aj);
                                        let got = data[(p * n + i) * n + j];
                                        let want = if allowed { 0.0 } else { -1e9 };
                                        assert_eq!(
                                            got, want,
                                            "h={h} w={w} win={window} shift={shift} p={p} i={i} j={j}"
                                        );
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn single_token_window_attention_weight_is_one() {
        let mut init = Initializer::new(1);
        let attn = WindowAttention::<f64>::new(4, 2, 1, &mut init).unwrap();
        let x = Tensor::from_vec(vec![0.3, -0.1, 0.7, 0.2], &[1, 1, 1, 4]).unwrap();
        let (_, weights) = attn.forward(&x, None).unwrap();
        assert_eq!(weights.to_vec(), vec![1.0, 1.0]);
    }

    #[test]
    fn equal_tokens_zero_bias_attend_uniformly() {
        let mut init = Initializer::new(2);
        let attn = WindowAttention::<f64>::new(4, 2, 2, &mut init).unwrap();
        // bias table is zero-initialized; identical tokens give equal logits
        let token = [0.4, -0.6, 0.2, 0.9];
        let data: Vec<f64> = token.iter().cycle().take(16).copied().collect();
        let x = Tensor::from_vec(data, &[1, 1, 4, 4]).unwrap();
        let (_, weights) = attn.forward(&x, None).unwrap();
        for &v in &weights.to_vec() {
            assert_relative_eq!(v, 0.25, epsilon = 1e-9);
        }
    }

    #[test]
    fn masked_positions_get_negligible_weight() {
        let mut init = Initializer::new(3);
        let attn = WindowAttention::<f64>::new(4, 1, 2, &mut init).unwrap();
        let x = Tensor::from_vec((0..16).map(|v| v as f64 * 0.1).collect(), &[1, 1, 4, 4])
            .unwrap();
        // forbid everything from attending to position 3
        let mut m = vec![0.0f64; 16];
        for q in 0..4 {
            m[q * 4 + 3] = -1e9;
        }
        let mask = tile_mask_heads(&Tensor::from_vec(m, &[1, 4, 4]).unwrap(), 1);
        let (_, weights) = attn.forward(&x, Some(&mask)).unwrap();
        let wv = weights.to_vec();
        for q in 0..4 {
            assert!(wv[q * 4 + 3] < 1e-6);
            assert_relative_eq!(wv[q * 4..(q + 1) * 4].iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn attention_rows_sum_to_one_with_mask_and_bias() {
        let mut init = Initializer::new(4);
        let attn = WindowAttention::<f64>::new(6, 3, 2, &mut init).unwrap();
        // put nonzero values in the bias table
        let table = init.trunc_normal::<f64>(&[9, 3]);
        attn.bias_table.set_data(&table.to_vec());
        let x = Tensor::from_vec(
            (0..48).map(|v| (v as f64) * 0.07 - 1.5).collect::<Vec<_>>(),
            &[2, 1, 4, 6],
        )
        .unwrap();
        let mask = tile_mask_heads(
            &shifted_window_mask::<f64>(2, 2, 2, 1).unwrap(),
            3,
        );
        let (_, weights) = attn.forward(&x, Some(&mask)).unwrap();
        for row in weights.to_vec().chunks(4) {
            assert_relative_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn bias_table_gets_gradient() {
        let mut init = Initializer::new(5);
        let attn = WindowAttention::<f64>::new(4, 2, 2, &mut init).unwrap();
        let x = Tensor::from_vec((0..16).map(|v| v as f64 * 0.05).collect(), &[1, 1, 4, 4])
            .unwrap()
            .requires_grad();
        let (out, _) = attn.forward(&x, None).unwrap();
        out.sum_all().backward().unwrap();
        let g = attn.bias_table.grad().expect("bias table is a leaf parameter");
        assert!(g.iter().any(|&v| v != 0.0));
    }
}
