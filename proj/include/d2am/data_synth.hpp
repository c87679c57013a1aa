#pragma once

// Synthetic mixed-domain live/spoof data. Each latent domain is a capture
// "style" (hue rotation, gain, background texture, sensor noise, attack cue);
// the face itself is a parametric luminance blob.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "d2am/error.hpp"
#include "d2am/rng.hpp"

namespace d2am {

enum class BackgroundFrequency { low, mid, high };

inline std::string to_string(BackgroundFrequency f) {
  switch (f) {
    case BackgroundFrequency::low: return "low";
    case BackgroundFrequency::mid: return "mid";
    case BackgroundFrequency::high: return "high";
  }
  return "low";
}

inline BackgroundFrequency background_from_string(const std::string& s) {
  if (s == "low") return BackgroundFrequency::low;
  if (s == "mid") return BackgroundFrequency::mid;
  if (s == "high") return BackgroundFrequency::high;
  throw ValidationError("background_frequency: expected low|mid|high, got '" + s + "'");
}

// Cycles across the image width for each background band.
inline double background_cycles(BackgroundFrequency f) {
  switch (f) {
    case BackgroundFrequency::low: return 1.0;
    case BackgroundFrequency::mid: return 2.5;
    case BackgroundFrequency::high: return 5.0;
  }
  return 1.0;
}

struct DomainStyle {
  double hue_shift = 0.0;        // [0, 1)
  double brightness_gain = 1.0;  // [0.5, 1.5]
  BackgroundFrequency background_frequency = BackgroundFrequency::low;
  double noise_sigma = 0.0;  // >= 0
  // Attack instrument: spoof samples carry a grid of this frequency (cycles/pixel) and amplitude.
  double cue_frequency = 0.42;
  double cue_amplitude = 0.06;

  auto tie() const {
    return std::tie(hue_shift, brightness_gain, background_frequency, noise_sigma, cue_frequency, cue_amplitude);
  }
  bool operator==(const DomainStyle& o) const { return tie() == o.tie(); }
};

struct DatasetSpec {
  int num_latent_domains = 3;
  int samples_per_domain = 800;
  int image_height = 32;
  int image_width = 32;
  int depth_height = 8;
  int depth_width = 8;
  std::vector<DomainStyle> domain_styles;
  std::vector<DomainStyle> held_out_domain_styles;
  int held_out_samples_per_domain = 400;
  // Per-sample capture variation around the domain style: hue offset drawn from
  // U(-hue_jitter, hue_jitter), gain scaled by U(1 - gain_jitter, 1 + gain_jitter).
  double hue_jitter = 0.08;
  double gain_jitter = 0.12;
  std::uint64_t seed = 0;

  void validate() const;
};

// The default desk-scale mixture: three source styles that differ in every
// style axis, plus one unseen target style.
inline DatasetSpec default_dataset_spec(std::uint64_t seed = 0) {
  DatasetSpec spec;
  spec.seed = seed;
  spec.domain_styles = {
      {0.00, 1.00, BackgroundFrequency::low, 0.02, 0.40, 0.20},
      {0.33, 0.70, BackgroundFrequency::mid, 0.04, 0.30, 0.22},
      {0.66, 1.30, BackgroundFrequency::high, 0.03, 0.45, 0.18},
  };
  spec.held_out_domain_styles = {
      {0.50, 0.85, BackgroundFrequency::mid, 0.03, 0.36, 0.20},
  };
  return spec;
}

inline void DatasetSpec::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ValidationError("DatasetSpec." + field + ": " + why);
  };
  if (num_latent_domains <= 0) fail("num_latent_domains", "must be positive");
  if (samples_per_domain <= 0) fail("samples_per_domain", "must be positive");
  if (samples_per_domain < 2) fail("samples_per_domain", "need at least 2 to hold both classes");
  if (held_out_samples_per_domain < 0) fail("held_out_samples_per_domain", "must be non-negative");
  if (image_height < 16 || image_width < 16) fail("image_size", "must be at least 16x16");
  if (depth_height <= 0 || depth_width <= 0) fail("depth_size", "must be positive");
  if (!(hue_jitter >= 0.0 && hue_jitter < 0.5)) fail("hue_jitter", "must lie in [0,0.5)");
  if (!(gain_jitter >= 0.0 && gain_jitter < 1.0)) fail("gain_jitter", "must lie in [0,1)");
  if (static_cast<int>(domain_styles.size()) != num_latent_domains)
    fail("domain_styles", "expected " + std::to_string(num_latent_domains) + " entries, got " +
                              std::to_string(domain_styles.size()));
  auto check_style = [&](const DomainStyle& s, const std::string& where) {
    if (!(s.hue_shift >= 0.0 && s.hue_shift < 1.0)) fail(where + ".hue_shift", "must lie in [0,1)");
    if (!(s.brightness_gain >= 0.5 && s.brightness_gain <= 1.5))
      fail(where + ".brightness_gain", "must lie in [0.5,1.5]");
    if (!(s.noise_sigma >= 0.0)) fail(where + ".noise_sigma", "must be >= 0");
    if (!(s.cue_frequency > 0.0 && s.cue_frequency <= 0.5)) fail(where + ".cue_frequency", "must lie in (0,0.5]");
    if (!(s.cue_amplitude >= 0.0)) fail(where + ".cue_amplitude", "must be >= 0");
  };
  std::vector<DomainStyle> all;
  for (std::size_t i = 0; i < domain_styles.size(); ++i) {
    check_style(domain_styles[i], "domain_styles[" + std::to_string(i) + "]");
    all.push_back(domain_styles[i]);
  }
  for (std::size_t i = 0; i < held_out_domain_styles.size(); ++i) {
    check_style(held_out_domain_styles[i], "held_out_domain_styles[" + std::to_string(i) + "]");
    all.push_back(held_out_domain_styles[i]);
  }
  for (std::size_t i = 0; i < all.size(); ++i)
    for (std::size_t j = i + 1; j < all.size(); ++j)
      if (all[i] == all[j]) fail("domain_styles", "styles " + std::to_string(i) + " and " + std::to_string(j) +
                                                      " are identical");
}

struct Sample {
  std::vector<float> image;  // H x W x 6, RGB then HSV, values in [0,1]
  int label = 0;             // 0 = spoof, 1 = live
  std::vector<float> depth;  // depth_h x depth_w
  int latent_domain = 0;     // ground truth, diagnostics only
  int pseudo_domain = 0;     // 1..K once clustered; 0 = unassigned
  bool held_out = false;     // belongs to the unseen target domain

  bool operator==(const Sample&) const = default;
};

struct Dataset {
  DatasetSpec spec;
  int height = 0;
  int width = 0;
  int depth_height = 0;
  int depth_width = 0;
  static constexpr int kChannels = 6;
  std::vector<Sample> samples;

  std::size_t image_size() const { return static_cast<std::size_t>(height) * width * kChannels; }
  std::size_t depth_size() const { return static_cast<std::size_t>(depth_height) * depth_width; }

  std::vector<std::size_t> indices(bool held_out) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (samples[i].held_out == held_out) out.push_back(i);
    return out;
  }
};

// --- colour conversion ------------------------------------------------------

using Rgb = std::array<double, 3>;

inline Rgb hsv_pixel_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double hh = h * 6.0;
  const int sector = static_cast<int>(hh) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1.0 - s);
  const double q = v * (1.0 - s * f);
  const double t = v * (1.0 - s * (1.0 - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

inline Rgb rgb_pixel_to_hsv(double r, double g, double b) {
  const double mx = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  const double delta = mx - mn;
  double h = 0.0;
  if (delta > 0.0) {
    if (mx == r) h = (g - b) / delta;
    else if (mx == g) h = (b - r) / delta + 2.0;
    else h = (r - g) / delta + 4.0;
    h /= 6.0;
    if (h < 0.0) h += 1.0;
    if (h >= 1.0) h -= 1.0;
  }
  const double s = mx > 0.0 ? delta / mx : 0.0;
  return {h, s, mx};
}

namespace detail {
inline std::atomic<bool>& hsv_clamp_warned() {
  static std::atomic<bool> warned{false};
  return warned;
}
}  // namespace detail

// Interleaved H x W x 3 RGB in [0,1] to HSV with hue in [0,1). Out-of-range
// inputs are clamped; the first occurrence per process is reported.
template <class T>
std::vector<T> rgb_to_hsv(std::span<const T> rgb) {
  require(rgb.size() % 3 == 0, "rgb_to_hsv: size must be a multiple of 3");
  std::vector<T> out(rgb.size());
  bool clamped = false;
  for (std::size_t i = 0; i < rgb.size(); i += 3) {
    double c[3];
    for (int k = 0; k < 3; ++k) {
      double v = static_cast<double>(rgb[i + k]);
      if (!(v >= 0.0 && v <= 1.0)) {
        clamped = true;
        v = std::isnan(v) ? 0.0 : std::clamp(v, 0.0, 1.0);
      }
      c[k] = v;
    }
    const Rgb hsv = rgb_pixel_to_hsv(c[0], c[1], c[2]);
    for (int k = 0; k < 3; ++k) out[i + k] = static_cast<T>(hsv[k]);
  }
  if (clamped && !detail::hsv_clamp_warned().exchange(true)) warn("rgb_to_hsv: input outside [0,1] was clamped");
  return out;
}

template <class T>
std::vector<T> hsv_to_rgb(std::span<const T> hsv) {
  require(hsv.size() % 3 == 0, "hsv_to_rgb: size must be a multiple of 3");
  std::vector<T> out(hsv.size());
  for (std::size_t i = 0; i < hsv.size(); i += 3) {
    const Rgb rgb = hsv_pixel_to_rgb(hsv[i], hsv[i + 1], hsv[i + 2]);
    for (int k = 0; k < 3; ++k) out[i + k] = static_cast<T>(rgb[k]);
  }
  return out;
}

// --- generation -------------------------------------------------------------

namespace detail {

inline Rgb rotate_hue(const Rgb& rgb, double shift) {
  const Rgb hsv = rgb_pixel_to_hsv(rgb[0], rgb[1], rgb[2]);
  return hsv_pixel_to_rgb(hsv[0] + shift, hsv[1], hsv[2]);
}

// Soft face support: 1 inside the blob, 0 in the background, ~1.5 px ramp.
inline double face_mask(double dist, double radius) { return std::clamp((radius - dist) / 1.5 + 0.5, 0.0, 1.0); }

struct Geometry {
  double cx, cy, radius;
};

inline Sample render_sample(const DatasetSpec& spec, const DomainStyle& style, int label, Rng& rng) {
  const int h = spec.image_height, w = spec.image_width;
  const double size = std::min(h, w);
  Geometry g{};
  g.cx = (0.5 + rng.uniform(-0.08, 0.08)) * w;
  g.cy = (0.5 + rng.uniform(-0.08, 0.08)) * h;
  g.radius = rng.uniform(0.28, 0.36) * size;
  const double skin_v = rng.uniform(0.85, 1.0);
  const double bg_phase = rng.uniform(0.0, 0.6);
  const double cue_phase_x = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double cue_phase_y = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double hue = std::fmod(style.hue_shift + rng.uniform(-spec.hue_jitter, spec.hue_jitter) + 1.0, 1.0);
  const double gain = style.brightness_gain * rng.uniform(1.0 - spec.gain_jitter, 1.0 + spec.gain_jitter);

  const Rgb skin = rotate_hue({0.85 * skin_v, 0.62 * skin_v, 0.50 * skin_v}, hue);
  const Rgb backdrop = rotate_hue({0.30, 0.45, 0.60}, hue);
  const double cycles = background_cycles(style.background_frequency);
  const double orientation = std::numbers::pi * (0.15 + 0.7 * style.hue_shift);
  const double ox = std::cos(orientation), oy = std::sin(orientation);

  Sample s;
  s.label = label;
  s.image.assign(static_cast<std::size_t>(h) * w * 6, 0.0f);
  std::vector<float> rgb(static_cast<std::size_t>(h) * w * 3);
  const double shade_sigma = 0.6 * g.radius;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      const double dx = px - g.cx, dy = py - g.cy;
      const double dist = std::sqrt(dx * dx + dy * dy);
      const double m = face_mask(dist, g.radius);
      const double shade = 0.6 + 0.4 * std::exp(-(dist * dist) / (2.0 * shade_sigma * shade_sigma));
      const double wave =
          0.75 + 0.25 * std::sin(2.0 * std::numbers::pi * (cycles * (px * ox + py * oy) / w + bg_phase));
      double cue = 0.0;
      if (label == 0)
        cue = style.cue_amplitude * 0.5 *
              (std::cos(2.0 * std::numbers::pi * style.cue_frequency * px + cue_phase_x) +
               std::cos(2.0 * std::numbers::pi * style.cue_frequency * py + cue_phase_y));
      for (int k = 0; k < 3; ++k) {
        double v = m * skin[k] * shade + (1.0 - m) * backdrop[k] * wave + cue;
        v *= gain;
        if (style.noise_sigma > 0.0) v += style.noise_sigma * rng.normal();
        rgb[(static_cast<std::size_t>(y) * w + x) * 3 + k] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  const auto hsv = rgb_to_hsv<float>(rgb);
  for (std::size_t p = 0; p < static_cast<std::size_t>(h) * w; ++p)
    for (int k = 0; k < 3; ++k) {
      s.image[p * 6 + k] = rgb[p * 3 + k];
      s.image[p * 6 + 3 + k] = hsv[p * 3 + k];
    }

  const int dh = spec.depth_height, dw = spec.depth_width;
  s.depth.assign(static_cast<std::size_t>(dh) * dw, 0.0f);
  if (label == 1) {
    // Radial bump with value 1 at the face centre, expressed in depth-grid units.
    const double sy = static_cast<double>(dh) / h, sx = static_cast<double>(dw) / w;
    const double sigma = 0.6 * g.radius * std::sqrt(sx * sy);
    for (int y = 0; y < dh; ++y)
      for (int x = 0; x < dw; ++x) {
        const double dy = (y + 0.5) - g.cy * sy, dx = (x + 0.5) - g.cx * sx;
        s.depth[static_cast<std::size_t>(y) * dw + x] =
            static_cast<float>(std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma)));
      }
  }
  return s;
}

}  // namespace detail

// Deterministic in spec (including seed). Domains are emitted in order, each with
// samples alternating live/spoof so every (domain, class) cell is balanced.
inline Dataset generate_dataset(const DatasetSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.spec = spec;
  ds.height = spec.image_height;
  ds.width = spec.image_width;
  ds.depth_height = spec.depth_height;
  ds.depth_width = spec.depth_width;

  auto emit = [&](const DomainStyle& style, int domain_id, int count, bool held_out) {
    for (int i = 0; i < count; ++i) {
      Rng rng(stream_seed(spec.seed, {stream::kData, static_cast<std::uint64_t>(domain_id),
                                      static_cast<std::uint64_t>(i)}));
      const int label = (i % 2 == 0) ? 1 : 0;
      Sample s = detail::render_sample(spec, style, label, rng);
      s.latent_domain = domain_id;
      s.held_out = held_out;
      ds.samples.push_back(std::move(s));
    }
  };
  for (int d = 0; d < spec.num_latent_domains; ++d)
    emit(spec.domain_styles[static_cast<std::size_t>(d)], d, spec.samples_per_domain, false);
  for (std::size_t j = 0; j < spec.held_out_domain_styles.size(); ++j)
    emit(spec.held_out_domain_styles[j], spec.num_latent_domains + static_cast<int>(j),
         spec.held_out_samples_per_domain, true);
  return ds;
}

}  // namespace d2am
