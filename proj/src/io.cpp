#include "mrus/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

namespace mrus::io {

namespace {

static_assert(std::endian::native == std::endian::little,
              "raw volume I/O assumes a little-endian host");

std::ofstream open_out(const fs::path& path, std::ios::openmode mode = std::ios::out) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, mode);
  if (!os) throw Error(ErrorCode::Io, "cannot write '" + path.string() + "'");
  return os;
}

std::ifstream open_in(const fs::path& path, std::ios::openmode mode = std::ios::in) {
  std::ifstream is(path, mode);
  if (!is) throw Error(ErrorCode::Io, "cannot read '" + path.string() + "'");
  return is;
}

void write_header(const fs::path& header, const GridGeometry& g, const char* scalar,
                  const fs::path& raw) {
  auto os = open_out(header);
  os << std::setprecision(17);
  os << "SVOL 1\n";
  os << "dims " << g.dims[0] << ' ' << g.dims[1] << ' ' << g.dims[2] << '\n';
  os << "spacing " << g.spacing.x() << ' ' << g.spacing.y() << ' ' << g.spacing.z() << '\n';
  os << "origin " << g.origin.x() << ' ' << g.origin.y() << ' ' << g.origin.z() << '\n';
  os << "frame " << frame_name(g.frame) << '\n';
  os << "scalar " << scalar << '\n';
  os << "byte_order little\n";
  os << "data " << raw.filename().string() << '\n';
}

struct Header {
  GridGeometry geometry;
  std::string scalar;
  fs::path data;
};

Header read_header(const fs::path& header) {
  std::istringstream is(read_text(header));
  std::string magic;
  int version = 0;
  if (!(is >> magic >> version) || magic != "SVOL" || version != 1) {
    throw Error(ErrorCode::Malformed, "'" + header.string() + "' is not an SVOL 1 header");
  }
  Header h;
  std::map<std::string, bool> seen;
  std::string key;
  while (is >> key) {
    seen[key] = true;
    if (key == "dims") {
      is >> h.geometry.dims[0] >> h.geometry.dims[1] >> h.geometry.dims[2];
    } else if (key == "spacing") {
      is >> h.geometry.spacing.x() >> h.geometry.spacing.y() >> h.geometry.spacing.z();
    } else if (key == "origin") {
      is >> h.geometry.origin.x() >> h.geometry.origin.y() >> h.geometry.origin.z();
    } else if (key == "frame") {
      std::string f;
      is >> f;
      h.geometry.frame = parse_frame(f);
    } else if (key == "scalar") {
      is >> h.scalar;
    } else if (key == "byte_order") {
      std::string order;
      is >> order;
      if (order != "little") throw Error(ErrorCode::Malformed, "unsupported byte order " + order);
    } else if (key == "data") {
      std::string name;
      is >> name;
      h.data = header.parent_path() / name;
    } else {
      throw Error(ErrorCode::Malformed, "unknown SVOL key '" + key + "'");
    }
    if (!is) throw Error(ErrorCode::Malformed, "bad value for SVOL key '" + key + "'");
  }
  for (const char* required : {"dims", "spacing", "origin", "frame", "scalar", "data"}) {
    if (!seen.count(required)) {
      throw Error(ErrorCode::Malformed, std::string("SVOL header missing '") + required + "'");
    }
  }
  try {
    h.geometry.validate();
  } catch (const Error& e) {
    throw Error(ErrorCode::Malformed, e.what());
  }
  return h;
}

template <typename T>
std::vector<T> read_raw(const fs::path& path, std::size_t count) {
  auto is = open_in(path, std::ios::binary);
  std::vector<T> data(count);
  is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(count * sizeof(T)));
  if (is.gcount() != static_cast<std::streamsize>(count * sizeof(T))) {
    throw Error(ErrorCode::Malformed, "raw file '" + path.string() + "' is truncated");
  }
  return data;
}

template <typename T>
void write_raw(const fs::path& path, const std::vector<T>& data) {
  auto os = open_out(path, std::ios::binary);
  os.write(reinterpret_cast<const char*>(data.data()),
           static_cast<std::streamsize>(data.size() * sizeof(T)));
}

fs::path raw_path(const fs::path& header) {
  fs::path raw = header;
  raw.replace_extension(".raw");
  return raw;
}

}  // namespace

std::string read_text(const fs::path& path) {
  auto is = open_in(path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  auto os = open_out(path);
  os << text;
}

void write_svol(const fs::path& header, const ScalarVolume& v) {
  const fs::path raw = raw_path(header);
  write_header(header, v.geometry(), "float32", raw);
  write_raw(raw, v.data());
}

ScalarVolume read_svol(const fs::path& header) {
  const Header h = read_header(header);
  if (h.scalar != "float32") {
    throw Error(ErrorCode::Malformed, "expected float32 volume, got " + h.scalar);
  }
  return ScalarVolume(h.geometry, read_raw<float>(h.data, h.geometry.size()));
}

void write_mask(const fs::path& header, const BinaryMask& m) {
  const fs::path raw = raw_path(header);
  write_header(header, m.geometry(), "uint8", raw);
  write_raw(raw, m.data());
}

BinaryMask read_mask(const fs::path& header) {
  const Header h = read_header(header);
  if (h.scalar != "uint8") throw Error(ErrorCode::Malformed, "expected uint8 mask, got " + h.scalar);
  BinaryMask m(h.geometry);
  m.data() = read_raw<std::uint8_t>(h.data, h.geometry.size());
  return m;
}

void write_cloud(const fs::path& path, const PointCloud& cloud) {
  auto os = open_out(path);
  os << "# frame " << frame_name(cloud.frame) << '\n';
  os << "# points " << cloud.size() << '\n';
  os << std::setprecision(12);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Vec3& p = cloud.points[i];
    const Vec3 n = cloud.has_normals() ? cloud.normals[i] : Vec3::Zero();
    os << p.x() << ' ' << p.y() << ' ' << p.z() << ' ' << n.x() << ' ' << n.y() << ' '
       << n.z() << '\n';
  }
}

PointCloud read_cloud(const fs::path& path) {
  auto is = open_in(path);
  PointCloud cloud;
  bool have_frame = false;
  bool any_normal = false;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    if (line[0] == '#') {
      std::string hash, key, value;
      ls >> hash >> key >> value;
      if (key == "frame") {
        cloud.frame = parse_frame(value);
        have_frame = true;
      }
      continue;
    }
    Vec3 p, n;
    if (!(ls >> p.x() >> p.y() >> p.z())) {
      throw Error(ErrorCode::Malformed, "bad point line in '" + path.string() + "'");
    }
    if (!(ls >> n.x() >> n.y() >> n.z())) n.setZero();
    if (n.squaredNorm() > 0.0) any_normal = true;
    cloud.points.push_back(p);
    cloud.normals.push_back(n);
  }
  if (!have_frame) throw Error(ErrorCode::Malformed, "cloud file has no '# frame' header");
  if (!any_normal) cloud.normals.clear();
  return cloud;
}

}  // namespace mrus::io
