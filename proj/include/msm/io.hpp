#ifndef MSM_IO_HPP
#define MSM_IO_HPP

#include <msm/errors.hpp>

#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>

namespace msm {

// Write-then-rename so readers never observe a partially written file.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os)
            throw DataError("cannot write " + tmp.string());
        os.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        if (!os)
            throw DataError("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

} // namespace msm

#endif
