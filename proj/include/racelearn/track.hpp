#ifndef RACELEARN_TRACK_HPP
#define RACELEARN_TRACK_HPP

#include "racelearn/core.hpp"
#include "racelearn/dataset_io.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

namespace racelearn {

struct TrackPoint {
    double s{};
    double x{};
    double y{};
    double w_left{};
    double w_right{};
};

struct TrackQuery {
    double s{};        ///< arc length of the projection
    double offset{};   ///< signed lateral offset, positive to the left of travel
    bool inside{};
    std::size_t segment{};
    double heading{};  ///< centreline heading at the projection
};

inline constexpr std::string_view track_header = "s,x,y,w_left,w_right";

/// Closed centreline polyline with per-point corridor widths.
class Track {
public:
    Track() = default;

    explicit Track(std::vector<TrackPoint> pts) : pts_(std::move(pts))
    {
        detail::require(pts_.size() >= 3, "Track: need at least three points");
        for (std::size_t i = 0; i < pts_.size(); ++i) {
            detail::require(pts_[i].w_left > 0.0 && pts_[i].w_right > 0.0, "Track: widths must be positive");
            if (i > 0) {
                detail::require(pts_[i].s > pts_[i - 1].s, "Track: points must be ordered by arc length");
            }
        }
        const auto& a = pts_.back();
        const auto& b = pts_.front();
        const double gap = std::hypot(b.x - a.x, b.y - a.y);
        detail::require(gap < 1.0 + 1e-9, "Track: closure gap must be below 1 m");
        length_ = a.s + gap;
        if (gap < 1e-9) {
            // Drop an explicit duplicate of the first point.
            pts_.pop_back();
            length_ = a.s;
        }
        heading_.resize(pts_.size());
        seg_len_.resize(pts_.size());
        for (std::size_t i = 0; i < pts_.size(); ++i) {
            const auto& p = pts_[i];
            const auto& q = pts_[(i + 1) % pts_.size()];
            heading_[i] = std::atan2(q.y - p.y, q.x - p.x);
            seg_len_[i] = std::hypot(q.x - p.x, q.y - p.y);
        }
        curvature_.resize(pts_.size());
        for (std::size_t i = 0; i < pts_.size(); ++i) {
            const std::size_t prev = (i + pts_.size() - 1) % pts_.size();
            const double dpsi = wrap_angle(heading_[i] - heading_[prev]);
            curvature_[i] = dpsi / (0.5 * (seg_len_[i] + seg_len_[prev]));
        }
    }

    [[nodiscard]] const std::vector<TrackPoint>& points() const { return pts_; }
    [[nodiscard]] std::size_t size() const { return pts_.size(); }
    [[nodiscard]] double length() const { return length_; }
    [[nodiscard]] double curvature_at(std::size_t i) const { return curvature_[i % pts_.size()]; }
    [[nodiscard]] double heading_at(std::size_t i) const { return heading_[i % pts_.size()]; }

    /// Centreline point at arc length s (wrapped to the lap).
    [[nodiscard]] std::pair<double, double> position_at(double s) const
    {
        const auto i = segment_at(s);
        const double t = (wrap_s(s) - pts_[i].s) / seg_len_[i];
        const auto& p = pts_[i];
        const auto& q = pts_[(i + 1) % pts_.size()];
        return {p.x + t * (q.x - p.x), p.y + t * (q.y - p.y)};
    }

    [[nodiscard]] std::size_t segment_at(double s) const
    {
        s = wrap_s(s);
        std::size_t lo = 0;
        std::size_t hi = pts_.size();
        while (hi - lo > 1) {
            const std::size_t mid = (lo + hi) / 2;
            if (pts_[mid].s <= s) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        return lo;
    }

    [[nodiscard]] double wrap_s(double s) const
    {
        s = std::fmod(s, length_);
        return s < 0.0 ? s + length_ : s;
    }

    /// Signed arc-length difference b - a wrapped to (-L/2, L/2].
    [[nodiscard]] double s_delta(double a, double b) const
    {
        double d = std::fmod(b - a, length_);
        if (d > 0.5 * length_) {
            d -= length_;
        } else if (d <= -0.5 * length_) {
            d += length_;
        }
        return d;
    }

    /// Projection onto segment i.
    [[nodiscard]] TrackQuery project_on(std::size_t i, double x, double y, double& dist2) const
    {
        const auto& p = pts_[i];
        const auto& q = pts_[(i + 1) % pts_.size()];
        const double ex = q.x - p.x;
        const double ey = q.y - p.y;
        const double len2 = ex * ex + ey * ey;
        double t = ((x - p.x) * ex + (y - p.y) * ey) / len2;
        t = std::clamp(t, 0.0, 1.0);
        const double px = p.x + t * ex;
        const double py = p.y + t * ey;
        dist2 = (x - px) * (x - px) + (y - py) * (y - py);
        const double cross = ex * (y - p.y) - ey * (x - p.x);
        const double d = std::sqrt(dist2);
        TrackQuery r;
        r.segment = i;
        r.s = wrap_s(p.s + t * seg_len_[i]);
        r.offset = cross >= 0.0 ? d : -d;
        const double wl = p.w_left + t * (q.w_left - p.w_left);
        const double wr = p.w_right + t * (q.w_right - p.w_right);
        r.inside = r.offset <= wl && r.offset >= -wr;
        r.heading = heading_[i];
        return r;
    }

    /// Nearest-segment projection over the whole lap.
    [[nodiscard]] TrackQuery query(double x, double y) const
    {
        TrackQuery best;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < pts_.size(); ++i) {
            double d2 = 0.0;
            auto q = project_on(i, x, y, d2);
            if (d2 < best_d) {
                best_d = d2;
                best = q;
            }
        }
        return best;
    }

    /// Nearest-segment projection searching `window` segments either side of `hint`.
    [[nodiscard]] TrackQuery query_near(double x, double y, std::size_t hint, std::size_t window = 40) const
    {
        const std::size_t n = pts_.size();
        if (2 * window + 1 >= n) {
            return query(x, y);
        }
        TrackQuery best;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k <= 2 * window; ++k) {
            const std::size_t i = (hint + n - window + k) % n;
            double d2 = 0.0;
            auto q = project_on(i, x, y, d2);
            if (d2 < best_d) {
                best_d = d2;
                best = q;
            }
        }
        return best;
    }

private:
    std::vector<TrackPoint> pts_;
    std::vector<double> heading_;
    std::vector<double> seg_len_;
    std::vector<double> curvature_;
    double length_{};
};

inline TrackQuery track_query(const Track& t, double x, double y) { return t.query(x, y); }

namespace detail {

/// Resamples a closed curve at roughly uniform arc-length spacing.
inline Track track_from_closed_curve(const std::vector<std::pair<double, double>>& dense, double spacing,
                                     double w_left, double w_right)
{
    std::vector<double> cum(dense.size() + 1, 0.0);
    for (std::size_t i = 0; i < dense.size(); ++i) {
        const auto& a = dense[i];
        const auto& b = dense[(i + 1) % dense.size()];
        cum[i + 1] = cum[i] + std::hypot(b.first - a.first, b.second - a.second);
    }
    const double total = cum.back();
    const auto n = static_cast<std::size_t>(std::max(3.0, std::ceil(total / spacing)));
    std::vector<TrackPoint> pts;
    std::size_t j = 0;
    for (std::size_t k = 0; k < n; ++k) {
        const double target = total * static_cast<double>(k) / static_cast<double>(n);
        while (cum[j + 1] < target) {
            ++j;
        }
        const double t = (target - cum[j]) / (cum[j + 1] - cum[j]);
        const auto& a = dense[j];
        const auto& b = dense[(j + 1) % dense.size()];
        pts.push_back({0.0, a.first + t * (b.first - a.first), a.second + t * (b.second - a.second), w_left, w_right});
    }
    for (std::size_t k = 1; k < pts.size(); ++k) {
        pts[k].s = pts[k - 1].s + std::hypot(pts[k].x - pts[k - 1].x, pts[k].y - pts[k - 1].y);
    }
    return Track(std::move(pts));
}

} // namespace detail

/// Two straights joined by semicircles, driven counter-clockwise from the
/// start of the bottom straight.
inline Track make_oval(double straight = 150.0, double radius = 50.0, double half_width = 5.0, double spacing = 1.0)
{
    std::vector<std::pair<double, double>> dense;
    const double step = 0.05;
    for (double s = 0.0; s < straight; s += step) {
        dense.emplace_back(s, 0.0);
    }
    for (double a = -std::numbers::pi / 2; a < std::numbers::pi / 2; a += step / radius) {
        dense.emplace_back(straight + radius * std::cos(a), radius + radius * std::sin(a));
    }
    for (double s = straight; s > 0.0; s -= step) {
        dense.emplace_back(s, 2.0 * radius);
    }
    for (double a = std::numbers::pi / 2; a < 1.5 * std::numbers::pi; a += step / radius) {
        dense.emplace_back(radius * std::cos(a), radius + radius * std::sin(a));
    }
    return detail::track_from_closed_curve(dense, spacing, half_width, half_width);
}

/// Smooth closed curve with mixed left/right curvature (radii from about 20 m
/// to several hundred metres). Used for scripted data collection.
inline Track make_mixed(double scale = 300.0, double half_width = 6.0, double spacing = 1.0)
{
    std::vector<std::pair<double, double>> dense;
    const int n = 40000;
    for (int i = 0; i < n; ++i) {
        const double th = 2.0 * std::numbers::pi * i / n;
        const double r = scale * (1.0 + 0.35 * std::cos(2.0 * th) + 0.1 * std::sin(3.0 * th) + 0.05 * std::cos(5.0 * th));
        dense.emplace_back(r * std::cos(th), r * std::sin(th));
    }
    return detail::track_from_closed_curve(dense, spacing, half_width, half_width);
}

/// Circle of the given radius, counter-clockwise.
inline Track make_ring(double radius = 60.0, double half_width = 5.0, double spacing = 1.0)
{
    std::vector<std::pair<double, double>> dense;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double th = 2.0 * std::numbers::pi * i / n - std::numbers::pi / 2;
        dense.emplace_back(radius * std::cos(th), radius + radius * std::sin(th));
    }
    return detail::track_from_closed_curve(dense, spacing, half_width, half_width);
}

inline void write_track_csv(std::ostream& out, const Track& t)
{
    out << track_header << '\n';
    using detail::fmt_double;
    for (const auto& p : t.points()) {
        out << fmt_double(p.s) << ',' << fmt_double(p.x) << ',' << fmt_double(p.y) << ',' << fmt_double(p.w_left)
            << ',' << fmt_double(p.w_right) << '\n';
    }
}

inline Track read_track_csv(std::istream& in)
{
    std::vector<TrackPoint> pts;
    for (const auto& r : detail::read_numeric_csv(in, track_header)) {
        pts.push_back({r[0], r[1], r[2], r[3], r[4]});
    }
    return Track(std::move(pts));
}

inline Track load_track(const std::string& path)
{
    if (path == "builtin:oval") {
        return make_oval();
    }
    if (path == "builtin:mixed") {
        return make_mixed();
    }
    if (path == "builtin:ring") {
        return make_ring();
    }
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot read track " + path);
    }
    return read_track_csv(in);
}

} // namespace racelearn

#endif // RACELEARN_TRACK_HPP
