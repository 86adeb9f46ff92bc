#include "msmg/image_io.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>

#include "msmg/error.hpp"

namespace msmg {

namespace {

cv::Mat to_mat_rgb(const Tensor<float>& t) {
    if (t.rank() != 3 || t.dim(0) != 3)
        throw ShapeError("expected {3,H,W} image tensor, got " + shape_str(t.shape));
    const int h = static_cast<int>(t.dim(1)), w = static_cast<int>(t.dim(2));
    cv::Mat m(h, w, CV_8UC3);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            auto& px = m.at<cv::Vec3b>(y, x);
            for (int c = 0; c < 3; ++c) {
                float v = t.data[(static_cast<std::size_t>(c) * h + y) * w + x];
                // BGR order on the Mat side
                px[2 - c] = static_cast<unsigned char>(
                    std::clamp(std::lround(v * 255.0f), 0L, 255L));
            }
        }
    return m;
}

Tensor<float> from_mat_rgb(const cv::Mat& m) {
    Tensor<float> t({3, static_cast<std::size_t>(m.rows), static_cast<std::size_t>(m.cols)});
    for (int y = 0; y < m.rows; ++y)
        for (int x = 0; x < m.cols; ++x) {
            const auto& px = m.at<cv::Vec3b>(y, x);
            for (int c = 0; c < 3; ++c)
                t.data[(static_cast<std::size_t>(c) * m.rows + y) * m.cols + x] =
                    static_cast<float>(px[2 - c]) / 255.0f;
        }
    return t;
}

}  // namespace

Tensor<float> load_rgb(const std::string& path) {
    cv::Mat m = cv::imread(path, cv::IMREAD_COLOR);
    if (m.empty()) throw DataError("cannot read image: " + path);
    return from_mat_rgb(m);
}

Tensor<float> load_mask(const std::string& path) {
    cv::Mat m = cv::imread(path, cv::IMREAD_GRAYSCALE);
    if (m.empty()) throw DataError("cannot read mask: " + path);
    Tensor<float> t({1, static_cast<std::size_t>(m.rows), static_cast<std::size_t>(m.cols)});
    for (int y = 0; y < m.rows; ++y)
        for (int x = 0; x < m.cols; ++x)
            t.data[static_cast<std::size_t>(y) * m.cols + x] =
                m.at<unsigned char>(y, x) > 127 ? 1.0f : 0.0f;
    return t;
}

void save_gray_png(const Tensor<float>& t, const std::string& path) {
    std::size_t h, w;
    if (t.rank() == 2) {
        h = t.dim(0);
        w = t.dim(1);
    } else if (t.rank() == 3 && t.dim(0) == 1) {
        h = t.dim(1);
        w = t.dim(2);
    } else if (t.rank() == 4 && t.dim(0) == 1 && t.dim(1) == 1) {
        h = t.dim(2);
        w = t.dim(3);
    } else {
        throw ShapeError("expected single-channel map, got " + shape_str(t.shape));
    }
    cv::Mat m(static_cast<int>(h), static_cast<int>(w), CV_8UC1);
    const std::size_t off = t.size() - h * w;  // skip leading singleton dims
    (void)off;
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
            m.at<unsigned char>(static_cast<int>(y), static_cast<int>(x)) =
                static_cast<unsigned char>(
                    std::clamp(std::lround(t.data[y * w + x] * 255.0f), 0L, 255L));
    if (!cv::imwrite(path, m)) throw DataError("cannot write PNG: " + path);
}

void save_rgb_png(const Tensor<float>& t, const std::string& path) {
    if (!cv::imwrite(path, to_mat_rgb(t))) throw DataError("cannot write PNG: " + path);
}

Tensor<float> resize_bilinear(const Tensor<float>& img, std::size_t out_h, std::size_t out_w) {
    if (img.rank() != 3) throw ShapeError("resize: expected {C,H,W}");
    const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
    Tensor<float> out({c, out_h, out_w});
    for (std::size_t ch = 0; ch < c; ++ch) {
        cv::Mat src(static_cast<int>(h), static_cast<int>(w), CV_32FC1,
                    const_cast<float*>(img.data.data() + ch * h * w));
        cv::Mat dst(static_cast<int>(out_h), static_cast<int>(out_w), CV_32FC1,
                    out.data.data() + ch * out_h * out_w);
        cv::resize(src, dst, dst.size(), 0, 0, cv::INTER_LINEAR);
    }
    return out;
}

Tensor<float> resize_nearest(const Tensor<float>& mask, std::size_t out_h, std::size_t out_w) {
    if (mask.rank() != 3) throw ShapeError("resize: expected {C,H,W}");
    const std::size_t c = mask.dim(0), h = mask.dim(1), w = mask.dim(2);
    Tensor<float> out({c, out_h, out_w});
    for (std::size_t ch = 0; ch < c; ++ch) {
        cv::Mat src(static_cast<int>(h), static_cast<int>(w), CV_32FC1,
                    const_cast<float*>(mask.data.data() + ch * h * w));
        cv::Mat dst(static_cast<int>(out_h), static_cast<int>(out_w), CV_32FC1,
                    out.data.data() + ch * out_h * out_w);
        cv::resize(src, dst, dst.size(), 0, 0, cv::INTER_NEAREST);
    }
    return out;
}

Tensor<float> jpeg_roundtrip(const Tensor<float>& img, int quality) {
    if (quality < 1 || quality > 100)
        throw ConfigError("jpeg quality must lie in [1,100]");
    // Per-channel grayscale encoding sidesteps the codec's mandatory 4:2:0
    // chroma subsampling, which is far from lossless even at quality 100.
    if (img.rank() != 3 || img.dim(0) != 3)
        throw ShapeError("expected {3,H,W} image tensor, got " + shape_str(img.shape));
    const int h = static_cast<int>(img.dim(1)), w = static_cast<int>(img.dim(2));
    Tensor<float> out(img.shape);
    for (int c = 0; c < 3; ++c) {
        cv::Mat plane(h, w, CV_8UC1);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                plane.at<unsigned char>(y, x) = static_cast<unsigned char>(std::clamp(
                    std::lround(img.data[(static_cast<std::size_t>(c) * h + y) * w + x] *
                                255.0f),
                    0L, 255L));
        std::vector<unsigned char> buf;
        cv::imencode(".jpg", plane, buf, {cv::IMWRITE_JPEG_QUALITY, quality});
        cv::Mat dec = cv::imdecode(buf, cv::IMREAD_GRAYSCALE);
        if (dec.empty()) throw DataError("jpeg decode failed");
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                out.data[(static_cast<std::size_t>(c) * h + y) * w + x] =
                    static_cast<float>(dec.at<unsigned char>(y, x)) / 255.0f;
    }
    return out;
}

}  // namespace msmg
