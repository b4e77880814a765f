// Image quality metrics: PSNR and SSIM (11x11 Gaussian window, sigma 1.5,
// k1=0.01, k2=0.03, dynamic range 1). SSIM is computed per channel over valid
// window positions and averaged.
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "json.hpp"

#include "mgnerf/errors.hpp"
#include "mgnerf/image.hpp"

namespace mgnerf {

constexpr double kPsnrCap = 99.0;

// 10*log10(1/MSE) for [0,1] images; identical images cap at 99 dB. When a
// mask is given, only pixels with mask > 0.5 count.
inline double psnr(const Image& a, const Image& b, const Image* mask = nullptr) {
    if (a.width != b.width || a.height != b.height || a.channels != b.channels)
        throw ArgumentError("psnr: image dimensions differ");
    double se = 0.0;
    size_t n = 0;
    for (size_t p = 0; p < a.pixel_count(); ++p) {
        if (mask && mask->data[p * mask->channels] <= 0.5) continue;
        for (int c = 0; c < a.channels; ++c) {
            double d = a.data[p * a.channels + c] - b.data[p * b.channels + c];
            se += d * d;
        }
        n += size_t(a.channels);
    }
    if (n == 0) return kPsnrCap;
    double mse = se / double(n);
    if (mse <= 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

namespace detail {
inline std::vector<double> ssim_window() {
    std::vector<double> w(11 * 11);
    const double sigma = 1.5;
    double sum = 0.0;
    for (int y = 0; y < 11; ++y)
        for (int x = 0; x < 11; ++x) {
            double dx = x - 5.0, dy = y - 5.0;
            w[size_t(y) * 11 + x] = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
            sum += w[size_t(y) * 11 + x];
        }
    for (double& v : w) v /= sum;
    return w;
}
}  // namespace detail

// Mean local SSIM over all fully-inside 11x11 windows. With a mask, only
// windows whose center pixel is masked-in contribute.
inline double ssim(const Image& a, const Image& b, const Image* mask = nullptr) {
    if (a.width != b.width || a.height != b.height || a.channels != b.channels)
        throw ArgumentError("ssim: image dimensions differ");
    if (a.width < 11 || a.height < 11)
        throw ArgumentError("ssim: images must be at least 11x11");
    static const std::vector<double> win = detail::ssim_window();
    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;

    double total = 0.0;
    size_t count = 0;
    for (int y = 0; y + 11 <= a.height; ++y)
        for (int x = 0; x + 11 <= a.width; ++x) {
            int cy = y + 5, cx = x + 5;
            if (mask && mask->at(cx, cy, 0) <= 0.5) continue;
            for (int ch = 0; ch < a.channels; ++ch) {
                double mx = 0, my = 0, mxx = 0, myy = 0, mxy = 0;
                for (int wy = 0; wy < 11; ++wy)
                    for (int wx = 0; wx < 11; ++wx) {
                        double w = win[size_t(wy) * 11 + wx];
                        double va = a.at(x + wx, y + wy, ch);
                        double vb = b.at(x + wx, y + wy, ch);
                        mx += w * va;
                        my += w * vb;
                        mxx += w * va * va;
                        myy += w * vb * vb;
                        mxy += w * va * vb;
                    }
                double vx = mxx - mx * mx, vy = myy - my * my, cov = mxy - mx * my;
                double s = ((2 * mx * my + c1) * (2 * cov + c2)) /
                           ((mx * mx + my * my + c1) * (vx + vy + c2));
                total += s;
                ++count;
            }
        }
    if (count == 0) return 1.0;
    return total / double(count);
}

struct MetricReport {
    std::string split;  // "train" or "novel_pose"
    std::vector<double> frame_psnr, frame_ssim;
    double mean_psnr = 0.0, mean_ssim = 0.0;
    bool masked = false;

    void finalize() {
        mean_psnr = mean_ssim = 0.0;
        for (double v : frame_psnr) mean_psnr += v;
        for (double v : frame_ssim) mean_ssim += v;
        if (!frame_psnr.empty()) mean_psnr /= double(frame_psnr.size());
        if (!frame_ssim.empty()) mean_ssim /= double(frame_ssim.size());
    }

    nlohmann::json to_json() const {
        return {{"split", split},        {"masked", masked},
                {"frame_psnr", frame_psnr}, {"frame_ssim", frame_ssim},
                {"mean_psnr", mean_psnr},   {"mean_ssim", mean_ssim}};
    }
};

}  // namespace mgnerf
