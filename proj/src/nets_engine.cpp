#include "spinelab/nets/engine.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Dense>

#include "spinelab/rng.hpp"

namespace spinelab::nets {

namespace {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<MatRM<T>>;
template <typename T>
using ConstMapRM = Eigen::Map<const MatRM<T>>;
template <typename T>
using StridedMap =
    Eigen::Map<MatRM<T>, Eigen::Unaligned, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap =
    Eigen::Map<const MatRM<T>, Eigen::Unaligned, Eigen::OuterStride<>>;

struct ConvGeometry {
  size_t rank;                         // 2 or 3 spatial axes
  std::array<int64_t, 3> in{1, 1, 1};  // input spatial extents
  std::array<int64_t, 3> out{1, 1, 1};
  std::array<int64_t, 3> kernel{1, 1, 1};
  std::array<int64_t, 3> stride{1, 1, 1};
  std::array<int64_t, 3> dilation{1, 1, 1};
  std::array<int64_t, 3> pad{0, 0, 0};
  int64_t in_spatial = 1, out_spatial = 1, patch = 1;  // patch = prod(kernel)
};

ConvGeometry conv_geometry(const LayerSpec& l,
                           const std::vector<int64_t>& in_shape) {
  ConvGeometry g;
  g.rank = l.spatial_rank();
  for (size_t a = 0; a < g.rank; ++a) {
    g.in[a] = in_shape[2 + a];
    g.kernel[a] = l.kernel[a];
    g.stride[a] = l.stride[a];
    g.dilation[a] = l.dilation[a];
    const int64_t keff = l.dilation[a] * (l.kernel[a] - 1) + 1;
    g.out[a] = (g.in[a] + g.stride[a] - 1) / g.stride[a];  // same padding
    const int64_t pad_total =
        std::max<int64_t>(0, (g.out[a] - 1) * g.stride[a] + keff - g.in[a]);
    g.pad[a] = pad_total / 2;
    g.in_spatial *= g.in[a];
    g.out_spatial *= g.out[a];
    g.patch *= g.kernel[a];
  }
  return g;
}

// Gathers the input patches for one chunk of output positions into a
// (Ci * patch) x B column matrix. 2D chunks cover the whole image; 3D
// chunks cover one leading-axis output slice to bound scratch memory.
template <typename T>
void im2col_2d(const T* in, int64_t ci, const ConvGeometry& g, T* col) {
  const int64_t B = g.out[0] * g.out[1];
  for (int64_t c = 0; c < ci; ++c) {
    const T* plane = in + c * g.in_spatial;
    for (int64_t k0 = 0; k0 < g.kernel[0]; ++k0) {
      for (int64_t k1 = 0; k1 < g.kernel[1]; ++k1) {
        T* row = col + ((c * g.kernel[0] + k0) * g.kernel[1] + k1) * B;
        for (int64_t o0 = 0; o0 < g.out[0]; ++o0) {
          const int64_t i0 = o0 * g.stride[0] - g.pad[0] + k0 * g.dilation[0];
          T* dst = row + o0 * g.out[1];
          if (i0 < 0 || i0 >= g.in[0]) {
            std::fill(dst, dst + g.out[1], T{});
            continue;
          }
          const T* src = plane + i0 * g.in[1];
          for (int64_t o1 = 0; o1 < g.out[1]; ++o1) {
            const int64_t i1 = o1 * g.stride[1] - g.pad[1] + k1 * g.dilation[1];
            dst[o1] = (i1 >= 0 && i1 < g.in[1]) ? src[i1] : T{};
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add_2d(const T* col, int64_t ci, const ConvGeometry& g, T* din) {
  const int64_t B = g.out[0] * g.out[1];
  for (int64_t c = 0; c < ci; ++c) {
    T* plane = din + c * g.in_spatial;
    for (int64_t k0 = 0; k0 < g.kernel[0]; ++k0) {
      for (int64_t k1 = 0; k1 < g.kernel[1]; ++k1) {
        const T* row = col + ((c * g.kernel[0] + k0) * g.kernel[1] + k1) * B;
        for (int64_t o0 = 0; o0 < g.out[0]; ++o0) {
          const int64_t i0 = o0 * g.stride[0] - g.pad[0] + k0 * g.dilation[0];
          if (i0 < 0 || i0 >= g.in[0]) continue;
          const T* src = row + o0 * g.out[1];
          T* dst = plane + i0 * g.in[1];
          for (int64_t o1 = 0; o1 < g.out[1]; ++o1) {
            const int64_t i1 = o1 * g.stride[1] - g.pad[1] + k1 * g.dilation[1];
            if (i1 >= 0 && i1 < g.in[1]) dst[i1] += src[o1];
          }
        }
      }
    }
  }
}

// One output slice od of a 3D conv; B = out[1] * out[2].
template <typename T>
void im2col_3d_slice(const T* in, int64_t ci, const ConvGeometry& g,
                     int64_t od, T* col) {
  const int64_t B = g.out[1] * g.out[2];
  const int64_t in_plane = g.in[1] * g.in[2];
  for (int64_t c = 0; c < ci; ++c) {
    const T* vol = in + c * g.in_spatial;
    for (int64_t k0 = 0; k0 < g.kernel[0]; ++k0) {
      const int64_t i0 = od * g.stride[0] - g.pad[0] + k0 * g.dilation[0];
      const bool in0 = (i0 >= 0 && i0 < g.in[0]);
      const T* slab = vol + (in0 ? i0 * in_plane : 0);
      for (int64_t k1 = 0; k1 < g.kernel[1]; ++k1) {
        for (int64_t k2 = 0; k2 < g.kernel[2]; ++k2) {
          T* row = col + (((c * g.kernel[0] + k0) * g.kernel[1] + k1) *
                              g.kernel[2] +
                          k2) *
                             B;
          if (!in0) {
            std::fill(row, row + B, T{});
            continue;
          }
          for (int64_t o1 = 0; o1 < g.out[1]; ++o1) {
            const int64_t i1 = o1 * g.stride[1] - g.pad[1] + k1 * g.dilation[1];
            T* dst = row + o1 * g.out[2];
            if (i1 < 0 || i1 >= g.in[1]) {
              std::fill(dst, dst + g.out[2], T{});
              continue;
            }
            const T* src = slab + i1 * g.in[2];
            for (int64_t o2 = 0; o2 < g.out[2]; ++o2) {
              const int64_t i2 =
                  o2 * g.stride[2] - g.pad[2] + k2 * g.dilation[2];
              dst[o2] = (i2 >= 0 && i2 < g.in[2]) ? src[i2] : T{};
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add_3d_slice(const T* col, int64_t ci, const ConvGeometry& g,
                         int64_t od, T* din) {
  const int64_t B = g.out[1] * g.out[2];
  const int64_t in_plane = g.in[1] * g.in[2];
  for (int64_t c = 0; c < ci; ++c) {
    T* vol = din + c * g.in_spatial;
    for (int64_t k0 = 0; k0 < g.kernel[0]; ++k0) {
      const int64_t i0 = od * g.stride[0] - g.pad[0] + k0 * g.dilation[0];
      if (i0 < 0 || i0 >= g.in[0]) continue;
      T* slab = vol + i0 * in_plane;
      for (int64_t k1 = 0; k1 < g.kernel[1]; ++k1) {
        for (int64_t k2 = 0; k2 < g.kernel[2]; ++k2) {
          const T* row = col + (((c * g.kernel[0] + k0) * g.kernel[1] + k1) *
                                    g.kernel[2] +
                                k2) *
                                   B;
          for (int64_t o1 = 0; o1 < g.out[1]; ++o1) {
            const int64_t i1 = o1 * g.stride[1] - g.pad[1] + k1 * g.dilation[1];
            if (i1 < 0 || i1 >= g.in[1]) continue;
            const T* src = row + o1 * g.out[2];
            T* dst = slab + i1 * g.in[2];
            for (int64_t o2 = 0; o2 < g.out[2]; ++o2) {
              const int64_t i2 =
                  o2 * g.stride[2] - g.pad[2] + k2 * g.dilation[2];
              if (i2 >= 0 && i2 < g.in[2]) dst[i2] += src[o2];
            }
          }
        }
      }
    }
  }
}

// Stride-1 3D convolutions run as shifted row accumulations instead of
// im2col + GEMM: the kernel footprint makes the column matrix far larger
// than the arithmetic it feeds.
template <typename T>
void conv3d_direct_forward(const T* in, const T* w, const T* bias, T* out,
                           int64_t ci, int64_t co, const ConvGeometry& g) {
  const int64_t in_plane = g.in[1] * g.in[2];
  const int64_t out_plane = g.out[1] * g.out[2];
  // Plane-resident ordering: one output plane accumulates in cache while
  // the 5 source planes are reused across all 25 in-plane taps.
  for (int64_t c = 0; c < co; ++c) {
    for (int64_t z = 0; z < g.out[0]; ++z) {
      T* dst_plane = out + c * g.out_spatial + z * out_plane;
      const T b = bias[c];
      for (int64_t i = 0; i < out_plane; ++i) dst_plane[i] = b;
      for (int64_t cin = 0; cin < ci; ++cin) {
        const T* src_vol = in + cin * g.in_spatial;
        const T* wslab = w + (c * ci + cin) * g.patch;
        for (int64_t k0 = 0; k0 < g.kernel[0]; ++k0) {
          const int64_t i0 = z + k0 * g.dilation[0] - g.pad[0];
          if (i0 < 0 || i0 >= g.in[0]) continue;
          const T* src_plane = src_vol + i0 * in_plane;
          for (int64_t k1 = 0; k1 < g.kernel[1]; ++k1) {
            const int64_t off1 = k1 * g.dilation[1] - g.pad[1];
            const int64_t y_lo = std::max<int64_t>(0, -off1);
            const int64_t y_hi = g.out[1] - 1 - std::max<int64_t>(0, off1);
            for (int64_t k2 = 0; k2 < g.kernel[2]; ++k2) {
              const int64_t off2 = k2 * g.dilation[2] - g.pad[2];
              const int64_t x_lo = std::max<int64_t>(0, -off2);
              const int64_t n2 =
                  g.out[2] - std::max<int64_t>(0, off2) - x_lo;
              if (n2 <= 0) continue;
              const T wv = wslab[(k0 * g.kernel[1] + k1) * g.kernel[2] + k2];
              for (int64_t y = y_lo; y <= y_hi; ++y) {
                const T* srow =
                    src_plane + (y + off1) * g.in[2] + x_lo + off2;
                T* drow = dst_plane + y * g.out[2] + x_lo;
                for (int64_t x = 0; x < n2; ++x) drow[x] += wv * srow[x];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv3d_direct_backward(const T* in, const T* w, const T* dout, T* din,
                            T* dw, T* db, int64_t ci, int64_t co,
                            const ConvGeometry& g) {
  const int64_t in_plane = g.in[1] * g.in[2];
  const int64_t out_plane = g.out[1] * g.out[2];
  for (int64_t c = 0; c < co; ++c) {
    const T* grow = dout + c * g.out_spatial;
    double s = 0.0;
    for (int64_t i = 0; i < g.out_spatial; ++i)
      s += static_cast<double>(grow[i]);
    db[c] += static_cast<T>(s);
  }

  // Input-gradient pass, one din plane resident at a time. din[i] receives
  // w[tap] * dout[o] at o = i - off(tap).
  for (int64_t cin = 0; cin < ci; ++cin) {
    for (int64_t iz = 0; iz < g.in[0]; ++iz) {
      T* din_plane = din + cin * g.in_spatial + iz * in_plane;
      for (int64_t c = 0; c < co; ++c) {
        const T* dout_vol = dout + c * g.out_spatial;
        const T* wslab = w + (c * ci + cin) * g.patch;
        for (int64_t k0 = 0; k0 < g.kernel[0]; ++k0) {
          const int64_t oz = iz - (k0 * g.dilation[0] - g.pad[0]);
          if (oz < 0 || oz >= g.out[0]) continue;
          const T* gplane = dout_vol + oz * out_plane;
          for (int64_t k1 = 0; k1 < g.kernel[1]; ++k1) {
            const int64_t off1 = k1 * g.dilation[1] - g.pad[1];
            const int64_t y_lo = std::max<int64_t>(0, off1);
            const int64_t y_hi =
                g.in[1] - 1 + std::min<int64_t>(0, off1);
            for (int64_t k2 = 0; k2 < g.kernel[2]; ++k2) {
              const int64_t off2 = k2 * g.dilation[2] - g.pad[2];
              const int64_t x_lo = std::max<int64_t>(0, off2);
              const int64_t n2 =
                  g.in[2] + std::min<int64_t>(0, off2) - x_lo;
              if (n2 <= 0 || y_lo > y_hi) continue;
              const T wv = wslab[(k0 * g.kernel[1] + k1) * g.kernel[2] + k2];
              for (int64_t iy = y_lo; iy <= y_hi; ++iy) {
                T* irow = din_plane + iy * g.in[2] + x_lo;
                const T* grow =
                    gplane + (iy - off1) * g.out[2] + x_lo - off2;
                for (int64_t x = 0; x < n2; ++x) irow[x] += wv * grow[x];
              }
            }
          }
        }
      }
    }
  }

  // Weight-gradient pass, one dout plane resident at a time; fixed-order
  // partial sums keep the reduction deterministic yet vectorizable.
  for (int64_t c = 0; c < co; ++c) {
    for (int64_t oz = 0; oz < g.out[0]; ++oz) {
      const T* gplane = dout + c * g.out_spatial + oz * out_plane;
      for (int64_t cin = 0; cin < ci; ++cin) {
        const T* src_vol = in + cin * g.in_spatial;
        T* wgrad = dw + (c * ci + cin) * g.patch;
        for (int64_t k0 = 0; k0 < g.kernel[0]; ++k0) {
          const int64_t i0 = oz + k0 * g.dilation[0] - g.pad[0];
          if (i0 < 0 || i0 >= g.in[0]) continue;
          const T* src_plane = src_vol + i0 * in_plane;
          for (int64_t k1 = 0; k1 < g.kernel[1]; ++k1) {
            const int64_t off1 = k1 * g.dilation[1] - g.pad[1];
            const int64_t y_lo = std::max<int64_t>(0, -off1);
            const int64_t y_hi = g.out[1] - 1 - std::max<int64_t>(0, off1);
            for (int64_t k2 = 0; k2 < g.kernel[2]; ++k2) {
              const int64_t off2 = k2 * g.dilation[2] - g.pad[2];
              const int64_t x_lo = std::max<int64_t>(0, -off2);
              const int64_t n2 =
                  g.out[2] - std::max<int64_t>(0, off2) - x_lo;
              if (n2 <= 0) continue;
              double d0 = 0.0, d1 = 0.0, d2 = 0.0, d3 = 0.0;
              for (int64_t y = y_lo; y <= y_hi; ++y) {
                const T* srow =
                    src_plane + (y + off1) * g.in[2] + x_lo + off2;
                const T* grow = gplane + y * g.out[2] + x_lo;
                int64_t x = 0;
                for (; x + 4 <= n2; x += 4) {
                  d0 += static_cast<double>(grow[x]) *
                        static_cast<double>(srow[x]);
                  d1 += static_cast<double>(grow[x + 1]) *
                        static_cast<double>(srow[x + 1]);
                  d2 += static_cast<double>(grow[x + 2]) *
                        static_cast<double>(srow[x + 2]);
                  d3 += static_cast<double>(grow[x + 3]) *
                        static_cast<double>(srow[x + 3]);
                }
                for (; x < n2; ++x)
                  d0 += static_cast<double>(grow[x]) *
                        static_cast<double>(srow[x]);
              }
              wgrad[(k0 * g.kernel[1] + k1) * g.kernel[2] + k2] +=
                  static_cast<T>((d0 + d1) + (d2 + d3));
            }
          }
        }
      }
    }
  }
}

uint64_t mix_seed(uint64_t seed, uint64_t salt) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

template <typename T>
void add_into(Tensor<T>& acc, const Tensor<T>& g) {
  for (int64_t i = 0; i < acc.numel(); ++i) acc[i] += g[i];
}

}  // namespace

template <typename T>
Executor<T>::Executor(const NetworkSpec& spec) : spec_(&spec) {
  spec.validate();
}

template <typename T>
const Tensor<T>& Executor<T>::activation(const std::string& layer_id) const {
  auto it = acts_.find(layer_id);
  if (it == acts_.end())
    throw ConfigError("no cached activation for layer " + layer_id);
  return it->second;
}

template <typename T>
void Executor<T>::run_conv_forward(const LayerSpec& l, const Tensor<T>& in,
                                   const NetworkParams<T>& params,
                                   Tensor<T>& out) {
  const ConvGeometry g = conv_geometry(l, in.shape());
  const int64_t N = in.dim(0);
  const int64_t ci = l.in_channels, co = l.out_channels;
  const int64_t K = ci * g.patch;
  const Tensor<T>& w = params.at(l.id, "weight");
  const Tensor<T>& b = params.at(l.id, "bias");

  std::vector<int64_t> out_shape{N, co};
  for (size_t a = 0; a < g.rank; ++a) out_shape.push_back(g.out[a]);
  out = Tensor<T>(out_shape);

  const bool unit_stride =
      g.stride[0] == 1 && g.stride[1] == 1 && g.stride[2] == 1;
  if (g.rank == 3 && unit_stride) {
    for (int64_t n = 0; n < N; ++n) {
      conv3d_direct_forward(in.data() + n * ci * g.in_spatial, w.data(),
                            b.data(), out.data() + n * co * g.out_spatial, ci,
                            co, g);
    }
    return;
  }

  const int64_t B = (g.rank == 2) ? g.out[0] * g.out[1] : g.out[1] * g.out[2];
  col_scratch_.resize(static_cast<size_t>(K * B));
  ConstMapRM<T> W(w.data(), co, K);

  for (int64_t n = 0; n < N; ++n) {
    const T* in_ptr = in.data() + n * ci * g.in_spatial;
    T* out_ptr = out.data() + n * co * g.out_spatial;
    const int64_t n_chunks = (g.rank == 2) ? 1 : g.out[0];
    for (int64_t chunk = 0; chunk < n_chunks; ++chunk) {
      if (g.rank == 2) {
        im2col_2d(in_ptr, ci, g, col_scratch_.data());
      } else {
        im2col_3d_slice(in_ptr, ci, g, chunk, col_scratch_.data());
      }
      ConstMapRM<T> col(col_scratch_.data(), K, B);
      StridedMap<T> dst(out_ptr + chunk * B, co, B,
                        Eigen::OuterStride<>(g.out_spatial));
      dst.noalias() = W * col;
    }
    for (int64_t c = 0; c < co; ++c) {
      T* row = out_ptr + c * g.out_spatial;
      const T bias = b[c];
      for (int64_t i = 0; i < g.out_spatial; ++i) row[i] += bias;
    }
  }
}

template <typename T>
void Executor<T>::run_conv_backward(const LayerSpec& l, const Tensor<T>& in,
                                    const Tensor<T>& dout,
                                    const NetworkParams<T>& params,
                                    NetworkParams<T>& grads, Tensor<T>& din) {
  const ConvGeometry g = conv_geometry(l, in.shape());
  const int64_t N = in.dim(0);
  const int64_t ci = l.in_channels, co = l.out_channels;
  const int64_t K = ci * g.patch;
  const Tensor<T>& w = params.at(l.id, "weight");

  if (!grads.has(l.id, "weight")) {
    grads.emplace(l.id, "weight", Tensor<T>(w.shape()));
    grads.emplace(l.id, "bias", Tensor<T>(std::vector<int64_t>{co}));
  }
  Tensor<T>& dw = grads.at(l.id, "weight");
  Tensor<T>& db = grads.at(l.id, "bias");
  din = Tensor<T>(in.shape());

  const bool unit_stride =
      g.stride[0] == 1 && g.stride[1] == 1 && g.stride[2] == 1;
  if (g.rank == 3 && unit_stride) {
    for (int64_t n = 0; n < N; ++n) {
      conv3d_direct_backward(in.data() + n * ci * g.in_spatial, w.data(),
                             dout.data() + n * co * g.out_spatial,
                             din.data() + n * ci * g.in_spatial, dw.data(),
                             db.data(), ci, co, g);
    }
    return;
  }

  const int64_t B = (g.rank == 2) ? g.out[0] * g.out[1] : g.out[1] * g.out[2];
  col_scratch_.resize(static_cast<size_t>(K * B));
  dcol_scratch_.resize(static_cast<size_t>(K * B));
  ConstMapRM<T> W(w.data(), co, K);
  MapRM<T> dW(dw.data(), co, K);

  for (int64_t n = 0; n < N; ++n) {
    const T* in_ptr = in.data() + n * ci * g.in_spatial;
    const T* dout_ptr = dout.data() + n * co * g.out_spatial;
    T* din_ptr = din.data() + n * ci * g.in_spatial;
    const int64_t n_chunks = (g.rank == 2) ? 1 : g.out[0];
    for (int64_t chunk = 0; chunk < n_chunks; ++chunk) {
      if (g.rank == 2) {
        im2col_2d(in_ptr, ci, g, col_scratch_.data());
      } else {
        im2col_3d_slice(in_ptr, ci, g, chunk, col_scratch_.data());
      }
      ConstMapRM<T> col(col_scratch_.data(), K, B);
      ConstStridedMap<T> dOut(dout_ptr + chunk * B, co, B,
                              Eigen::OuterStride<>(g.out_spatial));
      dW.noalias() += dOut * col.transpose();
      MapRM<T> dcol(dcol_scratch_.data(), K, B);
      dcol.noalias() = W.transpose() * dOut;
      if (g.rank == 2) {
        col2im_add_2d(dcol_scratch_.data(), ci, g, din_ptr);
      } else {
        col2im_add_3d_slice(dcol_scratch_.data(), ci, g, chunk, din_ptr);
      }
    }
    for (int64_t c = 0; c < co; ++c) {
      const T* row = dout_ptr + c * g.out_spatial;
      double s = 0.0;
      for (int64_t i = 0; i < g.out_spatial; ++i) s += static_cast<double>(row[i]);
      db[c] += static_cast<T>(s);
    }
  }
}

template <typename T>
std::map<std::string, Tensor<T>> Executor<T>::forward(
    const std::map<std::string, Tensor<T>>& inputs, NetworkParams<T>& params,
    bool train, uint64_t dropout_seed) {
  // Shape inference up front gives errors that name the offending layer.
  std::map<std::string, std::vector<int64_t>> port_shapes;
  for (const auto& p : spec_->input_ports) {
    auto it = inputs.find(p);
    if (it == inputs.end()) throw ShapeError("missing input port '" + p + "'");
    port_shapes[p] = it->second.shape();
  }
  spec_->infer_shapes(port_shapes);

  train_ = train;
  acts_.clear();
  dropout_masks_.clear();
  bn_cache_.clear();

  uint64_t layer_ordinal = 0;
  for (const auto& l : spec_->layers) {
    ++layer_ordinal;
    switch (l.kind) {
      case LayerKind::kInput: {
        acts_[l.id] = inputs.at(l.id);
        break;
      }
      case LayerKind::kConv2d:
      case LayerKind::kConv3d: {
        run_conv_forward(l, acts_.at(l.inputs[0]), params, acts_[l.id]);
        break;
      }
      case LayerKind::kAvgPool: {
        const Tensor<T>& x = acts_.at(l.inputs[0]);
        const size_t spatial = x.rank() - 2;
        std::vector<int64_t> oshape = x.shape();
        int64_t win = 1;
        for (size_t a = 0; a < spatial; ++a) {
          oshape[2 + a] = x.shape()[2 + a] / l.window[a];
          win *= l.window[a];
        }
        Tensor<T> out(oshape);
        // Iterate output positions; average the window.
        const int64_t NC = x.dim(0) * x.dim(1);
        int64_t in_sp = 1, out_sp = 1;
        for (size_t a = 0; a < spatial; ++a) {
          in_sp *= x.shape()[2 + a];
          out_sp *= oshape[2 + a];
        }
        const double inv = 1.0 / static_cast<double>(win);
        for (int64_t nc = 0; nc < NC; ++nc) {
          const T* src = x.data() + nc * in_sp;
          T* dst = out.data() + nc * out_sp;
          if (spatial == 2) {
            for (int64_t o0 = 0; o0 < oshape[2]; ++o0)
              for (int64_t o1 = 0; o1 < oshape[3]; ++o1) {
                double s = 0.0;
                for (int64_t k0 = 0; k0 < l.window[0]; ++k0)
                  for (int64_t k1 = 0; k1 < l.window[1]; ++k1)
                    s += static_cast<double>(
                        src[(o0 * l.window[0] + k0) * x.shape()[3] +
                            o1 * l.window[1] + k1]);
                dst[o0 * oshape[3] + o1] = static_cast<T>(s * inv);
              }
          } else {
            for (int64_t o0 = 0; o0 < oshape[2]; ++o0)
              for (int64_t o1 = 0; o1 < oshape[3]; ++o1)
                for (int64_t o2 = 0; o2 < oshape[4]; ++o2) {
                  double s = 0.0;
                  for (int64_t k0 = 0; k0 < l.window[0]; ++k0)
                    for (int64_t k1 = 0; k1 < l.window[1]; ++k1)
                      for (int64_t k2 = 0; k2 < l.window[2]; ++k2)
                        s += static_cast<double>(
                            src[((o0 * l.window[0] + k0) * x.shape()[3] +
                                 o1 * l.window[1] + k1) *
                                    x.shape()[4] +
                                o2 * l.window[2] + k2]);
                  dst[(o0 * oshape[3] + o1) * oshape[4] + o2] =
                      static_cast<T>(s * inv);
                }
          }
        }
        acts_[l.id] = std::move(out);
        break;
      }
      case LayerKind::kUpsample: {
        const Tensor<T>& x = acts_.at(l.inputs[0]);
        const size_t spatial = x.rank() - 2;
        std::vector<int64_t> oshape = x.shape();
        for (size_t a = 0; a < spatial; ++a) oshape[2 + a] *= l.window[a];
        Tensor<T> out(oshape);
        const int64_t NC = x.dim(0) * x.dim(1);
        int64_t in_sp = 1, out_sp = 1;
        for (size_t a = 0; a < spatial; ++a) {
          in_sp *= x.shape()[2 + a];
          out_sp *= oshape[2 + a];
        }
        for (int64_t nc = 0; nc < NC; ++nc) {
          const T* src = x.data() + nc * in_sp;
          T* dst = out.data() + nc * out_sp;
          if (spatial == 2) {
            for (int64_t o0 = 0; o0 < oshape[2]; ++o0) {
              const int64_t i0 = o0 / l.window[0];
              for (int64_t o1 = 0; o1 < oshape[3]; ++o1)
                dst[o0 * oshape[3] + o1] =
                    src[i0 * x.shape()[3] + o1 / l.window[1]];
            }
          } else {
            for (int64_t o0 = 0; o0 < oshape[2]; ++o0) {
              const int64_t i0 = o0 / l.window[0];
              for (int64_t o1 = 0; o1 < oshape[3]; ++o1) {
                const int64_t i1 = o1 / l.window[1];
                for (int64_t o2 = 0; o2 < oshape[4]; ++o2)
                  dst[(o0 * oshape[3] + o1) * oshape[4] + o2] =
                      src[(i0 * x.shape()[3] + i1) * x.shape()[4] +
                          o2 / l.window[2]];
              }
            }
          }
        }
        acts_[l.id] = std::move(out);
        break;
      }
      case LayerKind::kConcat: {
        std::vector<const Tensor<T>*> srcs;
        int64_t channels = 0;
        for (const auto& s : l.inputs) {
          srcs.push_back(&acts_.at(s));
          channels += srcs.back()->dim(1);
        }
        std::vector<int64_t> oshape = srcs[0]->shape();
        oshape[1] = channels;
        Tensor<T> out(oshape);
        const int64_t N = oshape[0];
        int64_t sp = 1;
        for (size_t a = 2; a < oshape.size(); ++a) sp *= oshape[a];
        for (int64_t n = 0; n < N; ++n) {
          int64_t c_off = 0;
          for (const Tensor<T>* s : srcs) {
            const int64_t c = s->dim(1);
            std::copy(s->data() + n * c * sp, s->data() + (n + 1) * c * sp,
                      out.data() + (n * channels + c_off) * sp);
            c_off += c;
          }
        }
        acts_[l.id] = std::move(out);
        break;
      }
      case LayerKind::kBatchNorm: {
        const Tensor<T>& x = acts_.at(l.inputs[0]);
        const int64_t N = x.dim(0), C = x.dim(1);
        int64_t sp = 1;
        for (size_t a = 2; a < x.rank(); ++a) sp *= x.shape()[a];
        Tensor<T> out(x.shape());
        Tensor<T>& gamma = params.at(l.id, "gamma");
        Tensor<T>& beta = params.at(l.id, "beta");
        BnCache cache;
        cache.mean.resize(static_cast<size_t>(C));
        cache.invstd.resize(static_cast<size_t>(C));
        if (train_) {
          Tensor<T>& rmean = params.at(l.id, "running_mean");
          Tensor<T>& rvar = params.at(l.id, "running_var");
          const double m = static_cast<double>(N * sp);
          for (int64_t c = 0; c < C; ++c) {
            double s = 0.0, s2 = 0.0;
            for (int64_t n = 0; n < N; ++n) {
              const T* src = x.data() + (n * C + c) * sp;
              for (int64_t i = 0; i < sp; ++i) {
                const double v = static_cast<double>(src[i]);
                s += v;
                s2 += v * v;
              }
            }
            const double mean = s / m;
            const double var = std::max(0.0, s2 / m - mean * mean);
            const double invstd = 1.0 / std::sqrt(var + l.bn_epsilon);
            cache.mean[static_cast<size_t>(c)] = mean;
            cache.invstd[static_cast<size_t>(c)] = invstd;
            rmean[c] = static_cast<T>((1.0 - l.bn_momentum) *
                                          static_cast<double>(rmean[c]) +
                                      l.bn_momentum * mean);
            rvar[c] = static_cast<T>(
                (1.0 - l.bn_momentum) * static_cast<double>(rvar[c]) +
                l.bn_momentum * var);
            const double gc = static_cast<double>(gamma[c]);
            const double bc = static_cast<double>(beta[c]);
            for (int64_t n = 0; n < N; ++n) {
              const T* src = x.data() + (n * C + c) * sp;
              T* dst = out.data() + (n * C + c) * sp;
              for (int64_t i = 0; i < sp; ++i)
                dst[i] = static_cast<T>(
                    (static_cast<double>(src[i]) - mean) * invstd * gc + bc);
            }
          }
        } else {
          const Tensor<T>& rmean = params.at(l.id, "running_mean");
          const Tensor<T>& rvar = params.at(l.id, "running_var");
          for (int64_t c = 0; c < C; ++c) {
            const double mean = static_cast<double>(rmean[c]);
            const double invstd =
                1.0 / std::sqrt(static_cast<double>(rvar[c]) + l.bn_epsilon);
            cache.mean[static_cast<size_t>(c)] = mean;
            cache.invstd[static_cast<size_t>(c)] = invstd;
            const double gc = static_cast<double>(gamma[c]);
            const double bc = static_cast<double>(beta[c]);
            for (int64_t n = 0; n < N; ++n) {
              const T* src = x.data() + (n * C + c) * sp;
              T* dst = out.data() + (n * C + c) * sp;
              for (int64_t i = 0; i < sp; ++i)
                dst[i] = static_cast<T>(
                    (static_cast<double>(src[i]) - mean) * invstd * gc + bc);
            }
          }
        }
        bn_cache_[l.id] = std::move(cache);
        acts_[l.id] = std::move(out);
        break;
      }
      case LayerKind::kDropout: {
        const Tensor<T>& x = acts_.at(l.inputs[0]);
        if (!train_ || l.rate == 0.0) {
          acts_[l.id] = x;
          break;
        }
        Rng rng(mix_seed(dropout_seed, layer_ordinal));
        const T keep_scale = static_cast<T>(1.0 / (1.0 - l.rate));
        Tensor<T> mask(x.shape());
        Tensor<T> out(x.shape());
        for (int64_t i = 0; i < x.numel(); ++i) {
          const T m = (rng.uniform() >= l.rate) ? keep_scale : T{};
          mask[i] = m;
          out[i] = x[i] * m;
        }
        dropout_masks_[l.id] = std::move(mask);
        acts_[l.id] = std::move(out);
        break;
      }
      case LayerKind::kRelu: {
        const Tensor<T>& x = acts_.at(l.inputs[0]);
        Tensor<T> out(x.shape());
        for (int64_t i = 0; i < x.numel(); ++i)
          out[i] = x[i] > T{} ? x[i] : T{};
        acts_[l.id] = std::move(out);
        break;
      }
    }
  }

  std::map<std::string, Tensor<T>> outputs;
  for (const auto& p : spec_->output_ports) outputs[p] = acts_.at(p);
  return outputs;
}

template <typename T>
std::map<std::string, Tensor<T>> Executor<T>::backward(
    const std::map<std::string, Tensor<T>>& output_grads,
    const NetworkParams<T>& params, NetworkParams<T>& grads) {
  if (acts_.empty()) throw Error("backward called before forward");

  std::map<std::string, Tensor<T>> grad_acc;
  for (const auto& [port, g] : output_grads) {
    if (!spec_->has_layer(port))
      throw ConfigError("gradient for unknown port '" + port + "'");
    if (!g.same_shape(acts_.at(port)))
      throw ShapeError("output gradient shape mismatch at port '" + port +
                       "'");
    auto it = grad_acc.find(port);
    if (it == grad_acc.end())
      grad_acc[port] = g;
    else
      add_into(it->second, g);
  }

  for (auto rit = spec_->layers.rbegin(); rit != spec_->layers.rend(); ++rit) {
    const LayerSpec& l = *rit;
    auto git = grad_acc.find(l.id);
    if (git == grad_acc.end()) continue;  // not on a path to any output
    const Tensor<T> dy = std::move(git->second);
    grad_acc.erase(git);

    auto push = [&](const std::string& src, Tensor<T>&& g) {
      auto it = grad_acc.find(src);
      if (it == grad_acc.end())
        grad_acc[src] = std::move(g);
      else
        add_into(it->second, g);
    };

    switch (l.kind) {
      case LayerKind::kInput: {
        grad_acc[l.id] = dy;  // keep for the caller
        break;
      }
      case LayerKind::kConv2d:
      case LayerKind::kConv3d: {
        Tensor<T> din;
        run_conv_backward(l, acts_.at(l.inputs[0]), dy, params, grads, din);
        push(l.inputs[0], std::move(din));
        break;
      }
      case LayerKind::kAvgPool: {
        const Tensor<T>& x = acts_.at(l.inputs[0]);
        const size_t spatial = x.rank() - 2;
        Tensor<T> din(x.shape());
        const int64_t NC = x.dim(0) * x.dim(1);
        int64_t in_sp = 1, out_sp = 1;
        std::vector<int64_t> oshape = dy.shape();
        for (size_t a = 0; a < spatial; ++a) {
          in_sp *= x.shape()[2 + a];
          out_sp *= oshape[2 + a];
        }
        int64_t win = 1;
        for (int64_t w : l.window) win *= w;
        const double inv = 1.0 / static_cast<double>(win);
        for (int64_t nc = 0; nc < NC; ++nc) {
          const T* gsrc = dy.data() + nc * out_sp;
          T* gdst = din.data() + nc * in_sp;
          if (spatial == 2) {
            for (int64_t o0 = 0; o0 < oshape[2]; ++o0)
              for (int64_t o1 = 0; o1 < oshape[3]; ++o1) {
                const T v =
                    static_cast<T>(static_cast<double>(gsrc[o0 * oshape[3] + o1]) * inv);
                for (int64_t k0 = 0; k0 < l.window[0]; ++k0)
                  for (int64_t k1 = 0; k1 < l.window[1]; ++k1)
                    gdst[(o0 * l.window[0] + k0) * x.shape()[3] +
                         o1 * l.window[1] + k1] += v;
              }
          } else {
            for (int64_t o0 = 0; o0 < oshape[2]; ++o0)
              for (int64_t o1 = 0; o1 < oshape[3]; ++o1)
                for (int64_t o2 = 0; o2 < oshape[4]; ++o2) {
                  const T v = static_cast<T>(
                      static_cast<double>(
                          gsrc[(o0 * oshape[3] + o1) * oshape[4] + o2]) *
                      inv);
                  for (int64_t k0 = 0; k0 < l.window[0]; ++k0)
                    for (int64_t k1 = 0; k1 < l.window[1]; ++k1)
                      for (int64_t k2 = 0; k2 < l.window[2]; ++k2)
                        gdst[((o0 * l.window[0] + k0) * x.shape()[3] +
                              o1 * l.window[1] + k1) *
                                 x.shape()[4] +
                             o2 * l.window[2] + k2] += v;
                }
          }
        }
        push(l.inputs[0], std::move(din));
        break;
      }
      case LayerKind::kUpsample: {
        const Tensor<T>& x = acts_.at(l.inputs[0]);
        const size_t spatial = x.rank() - 2;
        Tensor<T> din(x.shape());
        const int64_t NC = x.dim(0) * x.dim(1);
        int64_t in_sp = 1, out_sp = 1;
        std::vector<int64_t> oshape = dy.shape();
        for (size_t a = 0; a < spatial; ++a) {
          in_sp *= x.shape()[2 + a];
          out_sp *= oshape[2 + a];
        }
        for (int64_t nc = 0; nc < NC; ++nc) {
          const T* gsrc = dy.data() + nc * out_sp;
          T* gdst = din.data() + nc * in_sp;
          if (spatial == 2) {
            for (int64_t o0 = 0; o0 < oshape[2]; ++o0) {
              const int64_t i0 = o0 / l.window[0];
              for (int64_t o1 = 0; o1 < oshape[3]; ++o1)
                gdst[i0 * x.shape()[3] + o1 / l.window[1]] +=
                    gsrc[o0 * oshape[3] + o1];
            }
          } else {
            for (int64_t o0 = 0; o0 < oshape[2]; ++o0) {
              const int64_t i0 = o0 / l.window[0];
              for (int64_t o1 = 0; o1 < oshape[3]; ++o1) {
                const int64_t i1 = o1 / l.window[1];
                for (int64_t o2 = 0; o2 < oshape[4]; ++o2)
                  gdst[(i0 * x.shape()[3] + i1) * x.shape()[4] +
                       o2 / l.window[2]] +=
                      gsrc[(o0 * oshape[3] + o1) * oshape[4] + o2];
              }
            }
          }
        }
        push(l.inputs[0], std::move(din));
        break;
      }
      case LayerKind::kConcat: {
        const int64_t N = dy.dim(0);
        int64_t sp = 1;
        for (size_t a = 2; a < dy.rank(); ++a) sp *= dy.shape()[a];
        const int64_t c_total = dy.dim(1);
        int64_t c_off = 0;
        for (const auto& s : l.inputs) {
          const Tensor<T>& src_act = acts_.at(s);
          const int64_t c = src_act.dim(1);
          Tensor<T> g(src_act.shape());
          for (int64_t n = 0; n < N; ++n) {
            std::copy(dy.data() + (n * c_total + c_off) * sp,
                      dy.data() + (n * c_total + c_off + c) * sp,
                      g.data() + n * c * sp);
          }
          c_off += c;
          push(s, std::move(g));
        }
        break;
      }
      case LayerKind::kBatchNorm: {
        const Tensor<T>& x = acts_.at(l.inputs[0]);
        const int64_t N = x.dim(0), C = x.dim(1);
        int64_t sp = 1;
        for (size_t a = 2; a < x.rank(); ++a) sp *= x.shape()[a];
        const BnCache& cache = bn_cache_.at(l.id);
        const Tensor<T>& gamma = params.at(l.id, "gamma");
        if (!grads.has(l.id, "gamma")) {
          grads.emplace(l.id, "gamma", Tensor<T>(std::vector<int64_t>{C}));
          grads.emplace(l.id, "beta", Tensor<T>(std::vector<int64_t>{C}));
        }
        Tensor<T>& dgamma = grads.at(l.id, "gamma");
        Tensor<T>& dbeta = grads.at(l.id, "beta");
        Tensor<T> din(x.shape());
        const double m = static_cast<double>(N * sp);
        for (int64_t c = 0; c < C; ++c) {
          const double mean = cache.mean[static_cast<size_t>(c)];
          const double invstd = cache.invstd[static_cast<size_t>(c)];
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (int64_t n = 0; n < N; ++n) {
            const T* xs = x.data() + (n * C + c) * sp;
            const T* gs = dy.data() + (n * C + c) * sp;
            for (int64_t i = 0; i < sp; ++i) {
              const double xhat =
                  (static_cast<double>(xs[i]) - mean) * invstd;
              sum_dy += static_cast<double>(gs[i]);
              sum_dy_xhat += static_cast<double>(gs[i]) * xhat;
            }
          }
          dgamma[c] += static_cast<T>(sum_dy_xhat);
          dbeta[c] += static_cast<T>(sum_dy);
          const double gc = static_cast<double>(gamma[c]);
          if (train_) {
            const double k = gc * invstd / m;
            for (int64_t n = 0; n < N; ++n) {
              const T* xs = x.data() + (n * C + c) * sp;
              const T* gs = dy.data() + (n * C + c) * sp;
              T* gd = din.data() + (n * C + c) * sp;
              for (int64_t i = 0; i < sp; ++i) {
                const double xhat =
                    (static_cast<double>(xs[i]) - mean) * invstd;
                gd[i] = static_cast<T>(
                    k * (m * static_cast<double>(gs[i]) - sum_dy -
                         xhat * sum_dy_xhat));
              }
            }
          } else {
            const double k = gc * invstd;
            for (int64_t n = 0; n < N; ++n) {
              const T* gs = dy.data() + (n * C + c) * sp;
              T* gd = din.data() + (n * C + c) * sp;
              for (int64_t i = 0; i < sp; ++i)
                gd[i] = static_cast<T>(k * static_cast<double>(gs[i]));
            }
          }
        }
        push(l.inputs[0], std::move(din));
        break;
      }
      case LayerKind::kDropout: {
        if (!train_ || l.rate == 0.0) {
          Tensor<T> g = dy;
          push(l.inputs[0], std::move(g));
          break;
        }
        const Tensor<T>& mask = dropout_masks_.at(l.id);
        Tensor<T> din(dy.shape());
        for (int64_t i = 0; i < dy.numel(); ++i) din[i] = dy[i] * mask[i];
        push(l.inputs[0], std::move(din));
        break;
      }
      case LayerKind::kRelu: {
        const Tensor<T>& y = acts_.at(l.id);
        Tensor<T> din(dy.shape());
        for (int64_t i = 0; i < dy.numel(); ++i)
          din[i] = y[i] > T{} ? dy[i] : T{};
        push(l.inputs[0], std::move(din));
        break;
      }
    }
  }

  std::map<std::string, Tensor<T>> input_grads;
  for (const auto& p : spec_->input_ports) {
    auto it = grad_acc.find(p);
    if (it != grad_acc.end())
      input_grads[p] = std::move(it->second);
    else
      input_grads[p] = Tensor<T>(acts_.at(p).shape());
  }
  return input_grads;
}

template class Executor<float>;
template class Executor<double>;

}  // namespace spinelab::nets
