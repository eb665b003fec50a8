#include "mkdiff/pointset.hpp"
#include "mkdiff/rng.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <bit>
#include <cmath>
#include <numbers>
#include <numeric>

namespace mkdiff {
namespace {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

constexpr double kPi = std::numbers::pi;
constexpr double kTargetHeight = 1.7;
// Right-side limbs are thicker and more densely sampled.
constexpr double kRightGirth = 1.12;
constexpr double kRightDensity = 1.25;
// Per-body sampling jitter, in units of a part's mean parametric spacing.
constexpr double kSampleJitter = 0.35;

Mat3 rot_x(double a) { return Eigen::AngleAxisd(a, Vec3::UnitX()).toRotationMatrix(); }
Mat3 rot_y(double a) { return Eigen::AngleAxisd(a, Vec3::UnitY()).toRotationMatrix(); }

/// Capsule-like part: a cylinder with elliptic cross-section along the local
/// -z (limbs) or +z (trunk) axis, optionally closed by half-ellipsoid caps.
struct Segment {
  int label = 0;
  Vec3 start = Vec3::Zero();
  Mat3 frame = Mat3::Identity();  // columns: e1, e2, rest axis
  double axis_sign = -1.0;
  double length = 0.0;
  double rx = 0.0, ry = 0.0;
  double cap_start = 0.0, cap_end = 0.0;  // axial cap radii, 0 = open

  Vec3 axis() const { return axis_sign * frame.col(2); }
};

struct Subject {
  double arm = 1.0, leg = 1.0, torso = 1.0, girth = 1.0, shoulders = 1.0;
  double height = kTargetHeight;
};

Subject make_subject(std::uint64_t seed) {
  auto rng = make_rng(seed, "subject");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto in = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };
  Subject s;
  s.arm = in(0.93, 1.07);
  s.leg = in(0.93, 1.07);
  s.torso = in(0.93, 1.07);
  s.girth = in(0.88, 1.12);
  s.shoulders = in(0.94, 1.06);
  s.height = kTargetHeight * in(0.97, 1.03);
  return s;
}

std::vector<Segment> build_skeleton(const Subject& s, const Pose& pose) {
  const double g = s.girth;
  std::vector<Segment> segs;
  auto add = [&](int label, Vec3 start, Mat3 frame, double sign, double len, double rx, double ry,
                 double cap0, double cap1) {
    Segment seg;
    seg.label = label;
    seg.start = start;
    seg.frame = frame;
    seg.axis_sign = sign;
    seg.length = len;
    seg.rx = rx;
    seg.ry = ry;
    seg.cap_start = cap0;
    seg.cap_end = cap1;
    segs.push_back(seg);
  };

  // Trunk and head, growing along +z.
  const double pelvis_z = 0.92 * s.leg;
  const double abd_len = 0.25 * s.torso;
  const double tho_len = 0.27 * s.torso;
  add(kAbdomen, {0, 0, pelvis_z}, Mat3::Identity(), 1.0, abd_len, 0.14 * g, 0.10 * g, 0.08 * g, 0.0);
  const double chest_z = pelvis_z + abd_len;
  add(kThorax, {0, 0, chest_z}, Mat3::Identity(), 1.0, tho_len, 0.16 * g * s.shoulders, 0.11 * g,
      0.0, 0.06 * g);
  const double neck_z = chest_z + tho_len + 0.06 * g + 0.02;
  add(kHead, {0, 0, neck_z + 0.09}, Mat3::Identity(), 1.0, 0.08, 0.085, 0.095, 0.09, 0.09);

  const double shoulder_z = chest_z + tho_len - 0.03;
  const double shoulder_x = 0.20 * s.shoulders * g;
  const double hip_x = 0.10 * g;

  for (int side = 0; side < 2; ++side) {
    const bool right = side == 1;
    const double sx = right ? -1.0 : 1.0;     // subject's left is +x
    const double gs = right ? kRightGirth : 1.0;
    const int lbl_hand = right ? kRightHand : kLeftHand;
    const int lbl_lower_arm = right ? kRightLowerArm : kLeftLowerArm;
    const int lbl_upper_arm = right ? kRightUpperArm : kLeftUpperArm;
    const int lbl_foot = right ? kRightFoot : kLeftFoot;
    const int lbl_lower_leg = right ? kRightLowerLeg : kLeftLowerLeg;
    const int lbl_upper_leg = right ? kRightUpperLeg : kLeftUpperLeg;

    // Arms hang along -z; a positive abduction swings them away from the body.
    const double abduct = 0.35 + pose[0 + side];
    const double flex = pose[2 + side];
    const double elbow = pose[4 + side];
    const Mat3 r_upper = rot_y(-sx * abduct) * rot_x(flex);
    const Mat3 r_lower = r_upper * rot_x(elbow);
    const double ua_len = 0.28 * s.arm, la_len = 0.26 * s.arm, hand_len = 0.10 * s.arm;
    const Vec3 shoulder(sx * shoulder_x, 0.0, shoulder_z);
    Segment tmp;
    tmp.frame = r_upper;
    const Vec3 elbow_p = shoulder + ua_len * tmp.axis();
    tmp.frame = r_lower;
    const Vec3 wrist_p = elbow_p + la_len * tmp.axis();
    add(lbl_upper_arm, shoulder, r_upper, -1.0, ua_len, 0.05 * g * gs, 0.05 * g * gs, 0.05 * g * gs,
        0.045 * g * gs);
    add(lbl_lower_arm, elbow_p, r_lower, -1.0, la_len, 0.04 * g * gs, 0.04 * g * gs, 0.0,
        0.035 * g * gs);
    add(lbl_hand, wrist_p + 0.03 * tmp.axis(), r_lower, -1.0, hand_len, 0.045 * gs, 0.02 * gs,
        0.02 * gs, 0.03 * gs);

    const double hip_flex = pose[6 + side];
    const double knee = pose[8 + side];
    const Mat3 r_thigh = rot_y(-sx * 0.05) * rot_x(hip_flex);
    const Mat3 r_shin = r_thigh * rot_x(-knee);
    const Mat3 r_foot = r_shin * rot_x(kPi / 2);
    const double ul_len = 0.42 * s.leg, ll_len = 0.42 * s.leg, foot_len = 0.20 * s.leg;
    const Vec3 hip(sx * hip_x, 0.0, pelvis_z);
    tmp.frame = r_thigh;
    const Vec3 knee_p = hip + ul_len * tmp.axis();
    tmp.frame = r_shin;
    const Vec3 shin_axis = tmp.axis();
    const Vec3 ankle_p = knee_p + ll_len * shin_axis;
    tmp.frame = r_foot;
    const Vec3 foot_axis = tmp.axis();
    add(lbl_upper_leg, hip, r_thigh, -1.0, ul_len, 0.075 * g * gs, 0.075 * g * gs, 0.0,
        0.06 * g * gs);
    add(lbl_lower_leg, knee_p, r_shin, -1.0, ll_len, 0.055 * g * gs, 0.055 * g * gs, 0.0,
        0.0);
    add(lbl_foot, ankle_p + 0.03 * shin_axis - 0.04 * foot_axis, r_foot, -1.0, foot_len,
        0.045 * gs, 0.035 * gs, 0.03 * gs, 0.03 * gs);
  }
  std::sort(segs.begin(), segs.end(),
            [](const Segment& a, const Segment& b) { return a.label < b.label; });
  return segs;
}

double cylinder_area(const Segment& s) {
  // Ramanujan's ellipse perimeter.
  const double a = s.rx, b = s.ry;
  const double h = (a - b) * (a - b) / ((a + b) * (a + b));
  const double perim = kPi * (a + b) * (1 + 3 * h / (10 + std::sqrt(4 - 3 * h)));
  return perim * s.length;
}

double cap_area(const Segment& s, double axial) {
  if (axial <= 0.0) return 0.0;
  // Half of an ellipsoid's surface (Knud Thomsen's approximation).
  const double p = 1.6075;
  const double a = std::pow(s.rx, p), b = std::pow(s.ry, p), c = std::pow(axial, p);
  return 2.0 * kPi * std::pow((a * b + a * c + b * c) / 3.0, 1.0 / p);
}

bool is_right(int label) { return label >= kRightHand && label <= kRightUpperLeg; }

/// Unit-free surface coordinates; fixed per point index for a given n.
struct SurfaceSample {
  int label;
  double u1, u2, u3;
};

std::vector<SurfaceSample> template_samples(std::size_t n, const std::vector<Segment>& tmpl) {
  std::vector<double> weight(tmpl.size());
  for (std::size_t i = 0; i < tmpl.size(); ++i) {
    const auto& s = tmpl[i];
    weight[i] = cylinder_area(s) + cap_area(s, s.cap_start) + cap_area(s, s.cap_end);
    if (is_right(s.label)) weight[i] *= kRightDensity;
  }
  const double total = std::accumulate(weight.begin(), weight.end(), 0.0);

  // Largest-remainder allocation with at least two points per part.
  std::vector<std::size_t> count(tmpl.size(), 2);
  std::size_t assigned = 2 * tmpl.size();
  const double free = static_cast<double>(n - assigned);
  std::vector<std::pair<double, std::size_t>> rema;
  for (std::size_t i = 0; i < tmpl.size(); ++i) {
    const double exact = free * weight[i] / total;
    const auto whole = static_cast<std::size_t>(std::floor(exact));
    count[i] += whole;
    assigned += whole;
    rema.push_back({exact - static_cast<double>(whole), i});
  }
  std::sort(rema.begin(), rema.end(), [](auto& a, auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  for (std::size_t r = 0; assigned < n; ++r, ++assigned) ++count[rema[r % rema.size()].second];

  auto rng = make_rng(0x6d6b6469ULL, "template", {n});
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<SurfaceSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < tmpl.size(); ++i)
    for (std::size_t c = 0; c < count[i]; ++c) {
      SurfaceSample smp{tmpl[i].label, u(rng), u(rng), u(rng)};
      out.push_back(smp);
    }
  return out;
}

Vec3 place(const SurfaceSample& smp, const Segment& seg, const Segment& tmpl) {
  // Region fractions come from the template so the mapping is subject-free.
  const double cyl = cylinder_area(tmpl);
  const double c0 = cap_area(tmpl, tmpl.cap_start);
  const double c1 = cap_area(tmpl, tmpl.cap_end);
  const double total = cyl + c0 + c1;
  const Vec3 e1 = seg.frame.col(0);
  const Vec3 e2 = seg.frame.col(1);
  const Vec3 ax = seg.axis();
  const double t = smp.u1 * total;
  if (t < cyl) {
    const double a = t / cyl;
    const double theta = 2.0 * kPi * smp.u2;
    return seg.start + a * seg.length * ax + seg.rx * std::cos(theta) * e1 +
           seg.ry * std::sin(theta) * e2;
  }
  const bool at_start = t < cyl + c0;
  const double z = smp.u2;  // uniform height on a hemisphere is area-uniform
  const double phi = 2.0 * kPi * smp.u3;
  const double rho = std::sqrt(std::max(0.0, 1.0 - z * z));
  const Vec3 base = at_start ? seg.start : Vec3(seg.start + seg.length * ax);
  const double axial = at_start ? -seg.cap_start * z : seg.cap_end * z;
  return base + seg.rx * rho * std::cos(phi) * e1 + seg.ry * rho * std::sin(phi) * e2 + axial * ax;
}

double skeleton_height(const std::vector<Segment>& segs) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& s : segs) {
    for (double a : {0.0, 1.0}) {
      const Vec3 c = s.start + a * s.length * s.axis();
      const double reach = std::max({s.rx, s.ry, s.cap_start, s.cap_end});
      lo = std::min(lo, c.z() - reach);
      hi = std::max(hi, c.z() + reach);
    }
  }
  return hi - lo;
}

}  // namespace

Pose random_pose(std::uint64_t seed) {
  auto rng = make_rng(seed, "pose");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto in = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };
  Pose p{};
  for (int side = 0; side < 2; ++side) {
    p[0 + side] = in(-0.25, 0.9);
    p[2 + side] = in(-0.5, 1.0);
    p[4 + side] = in(0.0, 1.6);
    p[6 + side] = in(-0.3, 0.8);
    p[8 + side] = in(0.0, 1.2);
  }
  return p;
}

PointCloud generate_synthetic_body(std::uint64_t seed, std::size_t n_points, const Pose& pose) {
  if (n_points < 100) throw std::invalid_argument("synthetic body needs at least 100 points");
  for (double a : pose)
    if (!std::isfinite(a)) throw std::invalid_argument("pose angles must be finite");

  const Pose rest{};
  const auto tmpl = build_skeleton(Subject{}, rest);
  const auto samples = template_samples(n_points, tmpl);

  // Each body nudges its samples by a fraction of the local spacing in the
  // surface parameterization, so bodies share anatomy but not the exact
  // sampling pattern.
  std::vector<std::size_t> part_count(tmpl.size(), 0);
  for (const auto& smp : samples) ++part_count[static_cast<std::size_t>(smp.label - 1)];
  std::uint64_t pose_key = 0;
  for (double a : pose) pose_key = splitmix64(pose_key ^ std::bit_cast<std::uint64_t>(a));
  auto jitter_rng = make_rng(seed, "jitter", {pose_key, n_points});
  std::normal_distribution<double> gauss(0.0, 1.0);
  auto reflect = [](double v) {
    v = std::fmod(std::abs(v), 2.0);
    return std::min(v > 1.0 ? 2.0 - v : v, std::nextafter(1.0, 0.0));
  };
  auto jittered = samples;
  for (auto& smp : jittered) {
    const double step = kSampleJitter / std::sqrt(static_cast<double>(part_count[static_cast<std::size_t>(smp.label - 1)]));
    smp.u1 = reflect(smp.u1 + step * gauss(jitter_rng));
    smp.u2 = reflect(smp.u2 + step * gauss(jitter_rng));
    smp.u3 = smp.u3 + step * gauss(jitter_rng);
    smp.u3 -= std::floor(smp.u3);
  }

  const Subject subject = make_subject(seed);
  const double scale = subject.height / skeleton_height(build_skeleton(subject, rest));
  const auto segs = build_skeleton(subject, pose);

  PointCloud cloud;
  cloud.coords.resize(static_cast<Eigen::Index>(n_points), 3);
  std::vector<int> labels(n_points);
  std::vector<std::int64_t> corr(n_points);
  for (std::size_t i = 0; i < n_points; ++i) {
    const auto& smp = jittered[i];
    const auto idx = static_cast<std::size_t>(smp.label - 1);
    const Vec3 p = scale * place(smp, segs[idx], tmpl[idx]);
    cloud.coords.row(static_cast<Eigen::Index>(i)) = p.transpose();
    labels[i] = smp.label;
    corr[i] = static_cast<std::int64_t>(i);
  }
  // Feet rest on the ground plane.
  const double floor = cloud.coords.col(2).minCoeff();
  cloud.coords.col(2).array() -= floor;
  cloud.labels = std::move(labels);
  cloud.corr = std::move(corr);
  return cloud;
}

}  // namespace mkdiff
